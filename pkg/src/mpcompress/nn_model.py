"""Small networks with hand-written backward passes, SGD with momentum, cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .compressors import dense
from .tensor_core import ShapeError, Tensor, make_rng, seeded_normal


class Layer:
    kind = "layer"
    params: list

    def __init__(self):
        self.params = []

    def forward(self, x: Tensor):
        """Return ``(y, cache)``."""
        raise NotImplementedError

    def backward(self, grad: Tensor, cache):
        """Return ``(grad_in, [grad per param])``."""
        raise NotImplementedError

    def spec(self) -> str:
        return self.kind


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else make_rng(0)
        w = seeded_normal(rng, (n_out, n_in), 0.0, math.sqrt(2.0 / n_in))
        self.params = [w, np.zeros(n_out)]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"linear({self.n_in},{self.n_out}) got input {x.shape}")
        w, b = self.params
        return x @ w.T + b, x

    def backward(self, grad, cache):
        w, _ = self.params
        x = cache
        return grad @ w, [grad.T @ x, grad.sum(axis=0)]

    def spec(self):
        return f"linear {self.n_in} {self.n_out}"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, grad, cache):
        # subgradient at exactly 0 is 0
        return np.where(cache, grad, 0.0), []


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache):
        return grad.reshape(cache), []


class Conv2d(Layer):
    """2-d convolution on NCHW input via strided windows."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding
        rng = rng if rng is not None else make_rng(0)
        fan_in = in_ch * kernel * kernel
        w = seeded_normal(rng, (out_ch, in_ch, kernel, kernel), 0.0, math.sqrt(2.0 / fan_in))
        self.params = [w, np.zeros(out_ch)]

    def out_size(self, h: int) -> int:
        return (h + 2 * self.padding - self.kernel) // self.stride + 1

    def _cols(self, xp):
        k, s = self.kernel, self.stride
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        # (N, C, Ho, Wo, k, k) -> (N, Ho, Wo, C*k*k)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(xp.shape[0], win.shape[2], win.shape[3], -1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv2d expects (N,{self.in_ch},H,W), got {x.shape}")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = self._cols(xp)
        w, b = self.params
        y = cols @ w.reshape(self.out_ch, -1).T + b
        return y.transpose(0, 3, 1, 2), (x.shape, cols)

    def backward(self, grad, cache):
        x_shape, cols = cache
        w, _ = self.params
        k, s, p = self.kernel, self.stride, self.padding
        g = grad.transpose(0, 2, 3, 1)  # (N, Ho, Wo, out)
        n, ho, wo, _ = g.shape
        gw = (g.reshape(-1, self.out_ch).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        gb = g.sum(axis=(0, 1, 2))
        dcols = (g @ w.reshape(self.out_ch, -1)).reshape(n, ho, wo, self.in_ch, k, k)
        h_p, w_p = x_shape[2] + 2 * p, x_shape[3] + 2 * p
        dxp = np.zeros((n, self.in_ch, h_p, w_p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : h_p - p, p : w_p - p] if p else dxp
        return dx, [gw, gb]

    def spec(self):
        return f"conv2d {self.in_ch} {self.out_ch} {self.kernel} {self.stride} {self.padding}"


def layer_from_spec(line: str, rng=None) -> Layer:
    parts = line.split()
    kind, args = parts[0], [int(a) for a in parts[1:]]
    if kind == "linear":
        return Linear(*args, rng=rng)
    if kind == "conv2d":
        return Conv2d(*args, rng=rng)
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")


# --- stage-level passes -----------------------------------------------------


def forward(layers: Sequence[Layer], x: Tensor, cache: list | None = None) -> Tensor:
    if cache is not None:
        cache.clear()
    for layer in layers:
        x, c = layer.forward(x)
        if cache is not None:
            cache.append(c)
    return x


def backward(layers: Sequence[Layer], grad_out: Tensor, cache: list):
    """Return ``(grad_in, param_grads)`` with ``param_grads`` aligned to ``parameters(layers)``."""
    if len(cache) != len(layers):
        raise ValueError("backward called without a matching forward cache")
    per_layer = []
    g = grad_out
    for layer, c in zip(reversed(layers), reversed(cache)):
        g, pg = layer.backward(g, c)
        per_layer.append(pg)
    grads = [gr for pg in reversed(per_layer) for gr in pg]
    return g, grads


def parameters(layers: Sequence[Layer]) -> list:
    return [p for layer in layers for p in layer.params]


# --- losses -----------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor]:
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("labels out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def mse(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


LOSSES = {"cross_entropy": cross_entropy, "mse": mse}


# --- optimizer ----------------------------------------------------------------


@dataclass
class OptState:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr0: float = 0.01
    t_max: int = 200
    buffers: list = field(default_factory=list)


def sgd_momentum_step(opt: OptState, params: list, grads: list, lr: float) -> list:
    """In-place update: g' = g + wd*p; buf = mu*buf + g'; p -= lr*buf."""
    if len(params) != len(grads):
        raise ShapeError("parameter and gradient counts differ")
    if not opt.buffers:
        opt.buffers = [np.zeros_like(p) for p in params]
    for p, g, buf in zip(params, grads, opt.buffers):
        if p.shape != g.shape or buf.shape != p.shape:
            raise ShapeError(f"parameter {p.shape} / gradient {g.shape} mismatch")
        d = g + opt.weight_decay * p
        buf *= opt.momentum
        buf += d
        p -= lr * buf
    return params


def cosine_lr(t: int, lr0: float, t_max: int) -> float:
    if not 0 <= t <= t_max:
        raise ValueError(f"epoch {t} outside [0, {t_max}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / t_max))


# --- presets ----------------------------------------------------------------

PRESETS = {
    # 20 -> 64 -> 64 -> C
    "mlp": ["linear {d} 64", "relu", "linear 64 64", "relu", "linear 64 {c}"],
    # seven layers: splits into 4 stages as [2, 2, 2, 1], one ReLU output per link
    "mlp_deep": ["linear {d} 64", "relu", "linear 64 64", "relu", "linear 64 64", "relu", "linear 64 {c}"],
    # 1x28x28 -> 8x13x13 -> 16x6x6 -> C
    "cnn": ["conv2d 1 8 3 2 0", "relu", "conv2d 8 16 3 2 0", "relu", "flatten", "linear 576 {c}"],
}


@dataclass
class ModelSpec:
    layers: list
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


def preset_spec(name: str, in_dim: int = 20, classes: int = 10) -> ModelSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelSpec([s.format(d=in_dim, c=classes) for s in PRESETS[name]])


def build(spec: ModelSpec, seed: int) -> list:
    """Instantiate layers; one PCG64 stream initializes all weights in order."""
    rng = make_rng(seed)
    return [layer_from_spec(s, rng) for s in spec.layers]


# --- checkpoints --------------------------------------------------------------

CKPT_MAGIC = "MPCKPT 1"


def save_checkpoint(path, layers: Sequence[Layer], loss: str = "cross_entropy") -> None:
    """Text manifest, a blank line, then one lossless float64 Dense frame per parameter."""
    from .wire import encode

    lines = [CKPT_MAGIC, f"loss {loss}"]
    for layer in layers:
        shapes = " ".join("x".join(str(d) for d in p.shape) for p in layer.params)
        lines.append(f"layer {layer.spec()}" + (f" | {shapes}" if shapes else ""))
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    body = b"".join(encode(dense(p, exact=True)) for p in parameters(layers))
    with open(path, "wb") as fh:
        fh.write(header + body)


def load_checkpoint(path) -> tuple[list, str]:
    from .compressors import decompress
    from .wire import decode_from

    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ValueError("checkpoint manifest is not terminated")
    lines = blob[:sep].decode("ascii").split("\n")
    if lines[0] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    loss = lines[1].split()[1]
    layers = []
    for line in lines[2:]:
        spec = line[len("layer ") :].split("|")[0].strip()
        layers.append(layer_from_spec(spec))
    pos = sep + 2
    for p in parameters(layers):
        msg, pos = decode_from(blob, pos)
        if tuple(msg.shape) != p.shape:
            raise ValueError(f"checkpoint tensor shape {msg.shape} != {p.shape}")
        p[...] = decompress(msg)
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return layers, loss

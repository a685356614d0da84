"""Self-checks behind the ``codec-check`` and ``gradcheck`` subcommands.

Both return a report whose ``ok`` flag drives the CLI exit status.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..compressors import Dense, Quantized, Sparse, dense, quantize, topk, wire_cast
from ..nn_model import LOSSES, build, forward, parameters, preset_spec
from ..pipeline import LinkConfig, Pipeline, PipelineConfig
from ..tensor_core import make_rng
from ..wire import DecodeError, decode, encode, wire_size

GRAD_TOLERANCE = 1e-6
MAX_COORDS = 1000


@dataclass
class Report:
    name: str
    failures: list = field(default_factory=list)
    lines: list = field(default_factory=list)
    max_error: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    def text(self) -> str:
        status = "ok" if self.ok else f"FAILED ({len(self.failures)})"
        return "\n".join(self.lines + self.failures[:20] + [f"{self.name}: {status}"])


# --- codec ------------------------------------------------------------------------


def random_message(rng: np.random.Generator):
    rank = int(rng.integers(0, 4))
    shape = tuple(int(d) for d in rng.integers(1, 7, size=rank))
    n = int(np.prod(shape)) if shape else 1
    x = rng.normal(size=shape) * 10 ** rng.uniform(-4, 4)
    kind = int(rng.integers(0, 5))
    if kind == 0:
        return wire_cast(dense(x))
    if kind == 1:
        return dense(x, exact=True)
    if kind == 2:
        if rng.random() < 0.1:
            x = np.full(shape, float(x.reshape(-1)[0]))
        return wire_cast(quantize(x, int(rng.integers(1, 9))))
    if kind == 3:
        return wire_cast(topk(x, float(rng.uniform(0.01, 1.0))))
    nnz = int(rng.integers(0, n + 1))
    idx = np.sort(rng.choice(n, size=nnz, replace=False)).astype(np.int64)
    return wire_cast(Sparse(shape, idx, rng.normal(size=nnz)))


def same_message(a, b) -> bool:
    if type(a) is not type(b) or tuple(a.shape) != tuple(b.shape):
        return False
    if isinstance(a, Dense):
        return a.exact == b.exact and a.values.tobytes() == b.values.tobytes()
    if isinstance(a, Quantized):
        return (a.bits, a.min, a.max) == (b.bits, b.min, b.max) and np.array_equal(a.codes, b.codes)
    return np.array_equal(a.indices, b.indices) and a.values.tobytes() == b.values.tobytes()


def _mutate(frame: bytearray, rng) -> bytes:
    for _ in range(int(rng.integers(1, 4))):
        op = int(rng.integers(0, 3))
        if op == 0 and frame:
            frame[int(rng.integers(0, len(frame)))] ^= 1 << int(rng.integers(0, 8))
        elif op == 1:
            del frame[int(rng.integers(0, len(frame) + 1)) :]
        else:
            frame += rng.integers(0, 256, size=int(rng.integers(1, 5))).astype(np.uint8).tobytes()
    return bytes(frame)


def codec_check(trials: int, seed: int = 0) -> Report:
    """Round-trip, size and fuzz properties of the wire codec over random messages."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    rng = make_rng(seed)
    rep = Report("codec-check")
    counts = {"round_trip": 0, "size": 0, "fuzz_rejected": 0, "fuzz_accepted": 0}
    for t in range(trials):
        msg = random_message(rng)
        frame = encode(msg)
        if wire_size(msg) != len(frame):
            rep.failures.append(f"trial {t}: wire_size {wire_size(msg)} != encoded {len(frame)}")
        else:
            counts["size"] += 1
        try:
            back = decode(frame)
        except DecodeError as exc:
            rep.failures.append(f"trial {t}: valid frame rejected: {exc}")
            continue
        if same_message(back, msg) and encode(back) == frame:
            counts["round_trip"] += 1
        else:
            rep.failures.append(f"trial {t}: round trip changed the message")

        blob = _mutate(bytearray(frame), rng)
        try:
            decoded = decode(blob)
        except DecodeError:
            counts["fuzz_rejected"] += 1
        except Exception as exc:  # anything else is a codec bug
            rep.failures.append(f"trial {t}: fuzz input raised {type(exc).__name__}: {exc}")
        else:
            if encode(decoded) != blob:
                rep.failures.append(f"trial {t}: accepted fuzz frame does not re-encode identically")
            counts["fuzz_accepted"] += 1
    rep.lines.append(
        f"trials={trials} round_trip={counts['round_trip']} size={counts['size']} "
        f"fuzz_rejected={counts['fuzz_rejected']} fuzz_accepted={counts['fuzz_accepted']}"
    )
    return rep


# --- gradients --------------------------------------------------------------------


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` over the sampled coordinates, 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _fd_coords(f, tensor: np.ndarray, coords, eps: float) -> np.ndarray:
    flat = tensor.reshape(-1)
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        keep = flat[i]
        flat[i] = keep + eps
        up = f()
        flat[i] = keep - eps
        down = f()
        flat[i] = keep
        out[j] = (up - down) / (2 * eps)
    return out


def _sample(n: int, rng) -> np.ndarray:
    return np.arange(n) if n <= MAX_COORDS else np.sort(rng.choice(n, MAX_COORDS, replace=False))


def check_tensors(name, f, tensors, analytic, rng, rep: Report, eps: float = 1e-6) -> None:
    for k, (t, g) in enumerate(zip(tensors, analytic)):
        coords = _sample(t.size, rng)
        num = _fd_coords(f, t, coords, eps)
        err = relative_error(g.reshape(-1)[coords], num)
        rep.max_error = max(rep.max_error, err)
        rep.lines.append(f"{name} tensor {k} {t.shape}: rel err {err:.2e}")
        if not err < GRAD_TOLERANCE:
            rep.failures.append(f"{name} tensor {k}: rel err {err:.3e} >= {GRAD_TOLERANCE}")


def _layer_inputs(preset: str, rng, batch: int):
    if preset == "cnn":
        return rng.normal(size=(batch, 1, 28, 28)), 784
    return rng.normal(size=(batch, 20)), 20


def gradcheck(preset: str = "mlp", seed: int = 0, batch: int = 4, classes: int = 10) -> Report:
    """Analytic gradients against central differences, layer by layer and through pipelines.

    Each layer is checked with a random linear readout ``sum(w * layer(x))``.
    The whole model is then checked through identity-link pipelines of 1, 2
    and 4 stages (capped by the layer count).
    """
    rng = make_rng([seed, 1])
    x, in_dim = _layer_inputs(preset, rng, batch)
    spec = preset_spec(preset, in_dim=in_dim, classes=classes)
    layers = build(spec, seed)
    y = rng.integers(0, classes, size=batch)
    rep = Report(f"gradcheck[{preset}]")

    h = x
    seen = set()
    for layer in layers:
        out, cache = layer.forward(h)
        if layer.spec() not in seen:
            seen.add(layer.spec())
            w = rng.normal(size=out.shape)
            inp = h.copy()

            def f(layer=layer, inp=inp, w=w):
                return float(np.sum(w * layer.forward(inp)[0]))

            g_in, g_params = layer.backward(w, cache)
            check_tensors(f"layer {layer.spec()}", f, [inp] + layer.params, [g_in] + g_params, rng, rep)
        h = out

    loss_fn = LOSSES[spec.loss]
    for degree in (1, 2, 4):
        if degree > len(layers):
            continue
        cfg = PipelineConfig(degree=degree, links=LinkConfig())
        with Pipeline(layers, cfg, spec.loss) as pipe:
            _, grads = pipe.compute_gradients(x, y)
            flat_grads = [g for stage in grads for g in stage]

            def f():
                return loss_fn(forward(layers, x), y)[0]

            check_tensors(f"pipeline P={degree}", f, parameters(layers), flat_grads, rng, rep)
    rep.lines.append(f"max relative error {rep.max_error:.3e}")
    return rep

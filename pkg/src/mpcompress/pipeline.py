"""Sequential stages joined by compressed links.

A batch goes forward through every stage, then backward.  Every link
direction sends real wire frames over its channel.  Stage ``i`` owns the
sending half of link ``i``'s forward direction and the receiving half of its
backward direction.  Stage ``i + 1`` owns the other two halves.  Stages can
therefore run in one thread (``executor="sequential"``) or as one actor
thread each (``executor="threaded"``), with identical results.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .compressors import (
    CompressorConfig,
    Dense,
    Quantized,
    Sparse,
    WireCompressor,
    compress_at_indices,
    decompress,
    dense,
    wire_cast,
)
from .feedback import (
    FEEDBACK_MODES,
    AqsgdState,
    Ef21State,
    EfState,
    ProtocolError,
    aqsgd_receive,
    aqsgd_send,
    ef21_receive,
    ef21_step,
    ef_step,
    efmixed_step,
)
from .nn_model import LOSSES, Layer, OptState, backward, cosine_lr, forward, parameters, sgd_momentum_step
from .tensor_core import make_rng
from .transport import TRANSPORTS, TransportError, make_channel
from .wire import decode, encode, wire_size

EXECUTORS = ("sequential", "threaded")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or a payload that overflows the wire."""


def _finite_message(msg) -> bool:
    if isinstance(msg, Quantized):
        return bool(np.isfinite(msg.min) and np.isfinite(msg.max))
    return bool(np.all(np.isfinite(msg.values)))


@dataclass(frozen=True)
class DirectionConfig:
    compressor: CompressorConfig = field(default_factory=CompressorConfig)
    feedback: str = "none"

    def __post_init__(self):
        if self.feedback not in FEEDBACK_MODES:
            raise ValueError(f"unknown feedback mode {self.feedback!r}")
        if self.feedback == "ef_mixed" and self.compressor.kind != "topk":
            raise ValueError("ef_mixed requires a topk compressor")

    @property
    def passthrough(self) -> bool:
        return self.compressor.lossless and self.feedback == "none"


@dataclass(frozen=True)
class LinkConfig:
    forward: DirectionConfig = field(default_factory=DirectionConfig)
    backward: DirectionConfig = field(default_factory=DirectionConfig)
    reuse_indices: bool = False

    def __post_init__(self):
        if self.backward.feedback == "aqsgd":
            raise ValueError("aqsgd applies to forward activations only")
        if self.reuse_indices:
            if self.forward.compressor.kind != "topk" or self.backward.compressor.kind != "topk":
                raise ValueError("reuse_indices requires topk on both directions")
            if self.forward.feedback not in ("none", "ef", "ef21") or self.backward.feedback != "none":
                raise ValueError("reuse_indices supports forward none/ef/ef21 and backward none")


@dataclass
class PipelineConfig:
    degree: int = 1
    links: list = field(default_factory=list)
    transport: str = "in_process"
    warmup_epochs: int = 0
    executor: str = "sequential"

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("pipeline degree must be >= 1")
        if isinstance(self.links, LinkConfig):
            self.links = [self.links] * (self.degree - 1)
        if len(self.links) != self.degree - 1:
            raise ValueError(f"{self.degree} stages need {self.degree - 1} link configs, got {len(self.links)}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.executor not in EXECUTORS:
            raise ValueError(f"unknown executor {self.executor!r}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


@dataclass
class LinkStats:
    bytes_forward: int = 0
    bytes_backward: int = 0
    messages: int = 0


def partition(layers: Sequence[Layer], p: int) -> list:
    """Contiguous blocks, as equal as possible; earlier stages take the remainder."""
    n = len(layers)
    if p < 1 or p > n:
        raise ValueError(f"cannot split {n} layers into {p} stages")
    q, r = divmod(n, p)
    stages, start = [], 0
    for i in range(p):
        size = q + (1 if i < r else 0)
        stages.append(list(layers[start : start + size]))
        start += size
    return stages


def _sender_state(d: DirectionConfig, capacity):
    if d.feedback in ("ef", "ef_mixed"):
        return EfState()
    if d.feedback == "ef21":
        return Ef21State()
    if d.feedback == "aqsgd":
        return AqsgdState("sender", capacity)
    return None


def _receiver_state(d: DirectionConfig, capacity):
    if d.feedback == "ef21":
        return Ef21State()
    if d.feedback == "aqsgd":
        return AqsgdState("receiver", capacity)
    return None


class Link:
    """One pipeline cut: a forward and a backward channel plus their feedback states."""

    def __init__(self, cfg: LinkConfig, transport: str = "in_process", aqsgd_capacity: int | None = None):
        self.cfg = cfg
        self.fwd = make_channel(transport)
        self.bwd = make_channel(transport)
        self.stats = LinkStats()
        self._lock = threading.Lock()
        self.fwd_tx = _sender_state(cfg.forward, aqsgd_capacity)
        self.fwd_rx = _receiver_state(cfg.forward, aqsgd_capacity)
        self.bwd_tx = _sender_state(cfg.backward, None)
        self.bwd_rx = _receiver_state(cfg.backward, None)
        # forward index sets, consumed last-in first-out by the backward pass
        self._sent_indices: list = []
        self._recv_indices: list = []

    def close(self):
        self.fwd.close()
        self.bwd.close()

    def buffer_bytes(self) -> int:
        states = (self.fwd_tx, self.fwd_rx, self.bwd_tx, self.bwd_rx)
        return sum(s.nbytes() for s in states if s is not None)

    def _send(self, chan, msg, forward_dir: bool, count: bool = True):
        if not _finite_message(msg):
            raise DivergenceError("non-finite payload on link; training has diverged")
        if count:
            with self._lock:
                if forward_dir:
                    self.stats.bytes_forward += wire_size(msg)
                else:
                    self.stats.bytes_backward += wire_size(msg)
                self.stats.messages += 1
        chan.send(encode(msg))

    @staticmethod
    def _step(d: DirectionConfig, state, x):
        wc = WireCompressor(d.compressor)
        if d.feedback == "none":
            return wc(x)
        if d.feedback == "ef":
            return ef_step(state, x, wc)
        if d.feedback == "ef21":
            return ef21_step(state, x, wc)
        if d.feedback == "ef_mixed":
            return efmixed_step(state, x, d.compressor.ratio, cast=True)
        raise ValueError(f"feedback {d.feedback!r} is not a whole-tensor mode")

    # -- upstream stage side ---------------------------------------------------

    def send_activations(self, x, sample_ids=None, compress: bool = True) -> None:
        d = self.cfg.forward
        if not compress or d.passthrough:
            self._send(self.fwd, dense(x, exact=True), True)
            return
        if d.feedback == "aqsgd":
            if sample_ids is None:
                raise ValueError("aqsgd link needs sample ids")
            wc = WireCompressor(d.compressor)
            for sid, row in zip(sample_ids, x):
                self._send(self.fwd, aqsgd_send(self.fwd_tx, sid, row, wc, cast=True), True)
            return
        msg = self._step(d, self.fwd_tx, x)
        if self.cfg.reuse_indices:
            self._sent_indices.append(msg.indices)
        self._send(self.fwd, msg, True)

    def recv_gradients(self, compress: bool = True):
        d = self.cfg.backward
        msg = decode(self.bwd.recv())
        if not compress or d.passthrough:
            return decompress(msg)
        if self.cfg.reuse_indices:
            expected = self._sent_indices.pop()
            if not isinstance(msg, Sparse) or not np.array_equal(msg.indices, expected):
                raise ProtocolError("backward index set differs from the forward one")
        if d.feedback == "ef21":
            return ef21_receive(self.bwd_rx, msg)
        return decompress(msg)

    # -- downstream stage side -------------------------------------------------

    def recv_activations(self, sample_ids=None, compress: bool = True):
        d = self.cfg.forward
        if not compress or d.passthrough:
            return decompress(decode(self.fwd.recv()))
        if d.feedback == "aqsgd":
            rows = [aqsgd_receive(self.fwd_rx, sid, decode(self.fwd.recv())) for sid in sample_ids]
            return np.stack(rows)
        msg = decode(self.fwd.recv())
        if self.cfg.reuse_indices:
            self._recv_indices.append(msg.indices)
        if d.feedback == "ef21":
            return ef21_receive(self.fwd_rx, msg)
        return decompress(msg)

    def send_gradients(self, g, compress: bool = True) -> None:
        d = self.cfg.backward
        if not compress or d.passthrough:
            self._send(self.bwd, dense(g, exact=True), False)
            return
        if self.cfg.reuse_indices:
            msg = wire_cast(compress_at_indices(g, self._recv_indices.pop()))
        else:
            msg = self._step(d, self.bwd_tx, g)
        self._send(self.bwd, msg, False)

    # -- inference: plain compressor, feedback state untouched -----------------

    def send_eval(self, x, compress: bool) -> None:
        c = self.cfg.forward.compressor
        msg = WireCompressor(c)(x) if compress and not c.lossless else dense(x, exact=True)
        self._send(self.fwd, msg, True, count=False)

    def recv_eval(self):
        return decompress(decode(self.fwd.recv()))


class Pipeline:
    def __init__(
        self,
        layers: Sequence[Layer],
        config: PipelineConfig,
        loss: str = "cross_entropy",
        aqsgd_capacity: int | None = None,
    ):
        self.config = config
        self.stages = partition(layers, config.degree)
        self.loss_fn: Callable = LOSSES[loss]
        self.links = [Link(c, config.transport, aqsgd_capacity) for c in config.links]

    def close(self):
        for link in self.links:
            link.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def layers(self) -> list:
        return [layer for stage in self.stages for layer in stage]

    def stage_parameters(self) -> list:
        return [parameters(s) for s in self.stages]

    def bytes_forward(self) -> int:
        return sum(l.stats.bytes_forward for l in self.links)

    def bytes_backward(self) -> int:
        return sum(l.stats.bytes_backward for l in self.links)

    def buffer_bytes(self) -> int:
        return sum(l.buffer_bytes() for l in self.links)

    # -- one stage's share of a training step ------------------------------------

    def _stage_step(self, i, x, y, sample_ids, compress, out, update=None):
        stage = self.stages[i]
        last = i == len(self.stages) - 1
        h = x if i == 0 else self.links[i - 1].recv_activations(sample_ids, compress)
        cache: list = []
        h = forward(stage, h, cache)
        if last:
            loss, g = self.loss_fn(h, y)
            out["loss"] = loss
        else:
            self.links[i].send_activations(h, sample_ids, compress)
            g = self.links[i].recv_gradients(compress)
        g_in, grads = backward(stage, g, cache)
        if i > 0:
            self.links[i - 1].send_gradients(g_in, compress)
        out[i] = grads
        if update is not None:
            update(i, grads)

    def _run(self, x, y, sample_ids, compress, update=None) -> dict:
        out: dict = {}
        p = len(self.stages)
        if self.config.executor == "threaded" and p > 1:
            errors: list = []

            def actor(i):
                try:
                    self._stage_step(i, x, y, sample_ids, compress, out, update)
                except BaseException as exc:  # surfaced to the caller below
                    errors.append(exc)
                    # unblock peers waiting on this stage; the pipeline is unusable afterwards
                    self.close()

            threads = [threading.Thread(target=actor, args=(i,)) for i in range(p)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            if errors:
                primary = [e for e in errors if not isinstance(e, TransportError)]
                raise (primary or errors)[0]
            return out
        # sequential: forward sweep then backward sweep, same per-stage operations
        caches, h = [], x
        for i, stage in enumerate(self.stages):
            if i > 0:
                h = self.links[i - 1].recv_activations(sample_ids, compress)
            cache: list = []
            h = forward(stage, h, cache)
            caches.append(cache)
            if i < p - 1:
                self.links[i].send_activations(h, sample_ids, compress)
        out["loss"], g = self.loss_fn(h, y)
        for i in reversed(range(p)):
            if i < p - 1:
                g = self.links[i].recv_gradients(compress)
            g, out[i] = backward(self.stages[i], g, caches[i])
            if i > 0:
                self.links[i - 1].send_gradients(g, compress)
            if update is not None:
                update(i, out[i])
        return out

    def compute_gradients(self, x, y, sample_ids=None, compress: bool = True):
        """Loss and per-stage parameter gradients, without updating anything."""
        out = self._run(x, y, sample_ids, compress)
        return out["loss"], [out[i] for i in range(len(self.stages))]

    def train_step(self, x, y, sample_ids, lr: float, opts: Sequence[OptState], compress: bool = True) -> float:
        """One synchronous step; each stage applies SGD to its own parameters."""

        def update(i, grads):
            sgd_momentum_step(opts[i], parameters(self.stages[i]), grads, lr)

        loss = self._run(x, y, sample_ids, compress, update)["loss"]
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became {loss}")
        return loss

    def predict(self, x, compression_on: bool):
        h = x
        for i, stage in enumerate(self.stages):
            if i > 0:
                h = self.links[i - 1].recv_eval()
            h = forward(stage, h)
            if i < len(self.stages) - 1:
                self.links[i].send_eval(h, compression_on)
        return h

    def evaluate(self, x, y, compression_on: bool, batch_size: int = 100) -> tuple[float, float]:
        n = len(x)
        if n == 0:
            return float("nan"), float("nan")
        total_loss, correct = 0.0, 0
        for s in range(0, n, batch_size):
            xb, yb = x[s : s + batch_size], y[s : s + batch_size]
            logits = self.predict(xb, compression_on)
            loss, _ = self.loss_fn(logits, yb)
            total_loss += loss * len(xb)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        return total_loss / n, correct / n


def evaluate(pipe: Pipeline, dataset, compression_on: bool, batch_size: int = 100):
    return pipe.evaluate(dataset.x_test, dataset.y_test, compression_on, batch_size)


# -- epochs ----------------------------------------------------------------------


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Seeded shuffle of ``range(n)`` cut into full batches (the ragged tail is dropped)."""
    if not 0 < batch_size <= n:
        raise ValueError(f"batch size {batch_size} invalid for {n} samples")
    perm = make_rng([seed, epoch]).permutation(n)
    return [perm[s : s + batch_size] for s in range(0, n - batch_size + 1, batch_size)]


@dataclass
class TrainSettings:
    lr0: float = 0.01
    t_max: int = 200
    batch_size: int = 50
    seed: int = 0
    warmup_epochs: int = 0
    eval_modes: str = "both"


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    test_loss_on: float | None
    test_acc_on: float | None
    test_loss_off: float | None
    test_acc_off: float | None
    bytes_forward: int
    bytes_backward: int
    feedback_buffer_bytes: int


def run_epoch(pipe: Pipeline, dataset, epoch_index: int, opts, metrics_sink, settings: TrainSettings) -> EpochMetrics:
    lr = cosine_lr(epoch_index, settings.lr0, settings.t_max)
    compress = epoch_index >= settings.warmup_epochs
    losses = []
    for idx in batch_order(len(dataset.x_train), settings.batch_size, settings.seed, epoch_index):
        losses.append(
            pipe.train_step(dataset.x_train[idx], dataset.y_train[idx], dataset.ids_train[idx], lr, opts, compress)
        )
    on = off = (None, None)
    if settings.eval_modes in ("on", "both"):
        on = evaluate(pipe, dataset, True, settings.batch_size)
    if settings.eval_modes in ("off", "both"):
        off = evaluate(pipe, dataset, False, settings.batch_size)
    row = EpochMetrics(
        epoch=epoch_index,
        lr=lr,
        train_loss=float(np.mean(losses)) if losses else float("nan"),
        test_loss_on=on[0],
        test_acc_on=on[1],
        test_loss_off=off[0],
        test_acc_off=off[1],
        bytes_forward=pipe.bytes_forward(),
        bytes_backward=pipe.bytes_backward(),
        feedback_buffer_bytes=pipe.buffer_bytes(),
    )
    if metrics_sink is not None:
        metrics_sink(row)
    return row

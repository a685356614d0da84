"""Error-compensation state machines wrapped around a compressor.

Each state object belongs to one link direction.  ``compressor`` arguments are
any callable that maps a tensor to a message: a :class:`CompressorConfig`, or
a :class:`WireCompressor` when the reconstruction must match what the receiver
decodes bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compressors import (
    Compressor,
    CompressedMessage,
    Dense,
    Sparse,
    decompress,
    dense,
    topk,
    wire_cast,
)
from .tensor_core import ShapeError, Tensor, check_finite

FEEDBACK_MODES = ("none", "ef", "ef21", "ef_mixed", "aqsgd")


class ProtocolError(RuntimeError):
    """A peer sent a message the receiving state machine cannot accept."""


def _check_shape(buf: np.ndarray | None, x: Tensor) -> None:
    if buf is not None and buf.shape != x.shape:
        raise ShapeError(f"payload shape {x.shape} differs from buffer shape {buf.shape}")


@dataclass
class EfState:
    """Sender-side compression residual ``e``; shape fixed by the first payload."""

    error: np.ndarray | None = None

    def nbytes(self) -> int:
        return 0 if self.error is None else self.error.nbytes


@dataclass
class Ef21State:
    """Reference vector ``g``; sender and receiver each keep one."""

    g: np.ndarray | None = None

    def nbytes(self) -> int:
        return 0 if self.g is None else self.g.nbytes


def ef_step(state: EfState, x: Tensor, compressor: Compressor) -> CompressedMessage:
    _check_shape(state.error, x)
    e = state.error if state.error is not None else np.zeros_like(x)
    check_finite(e, "error buffer")
    corrected = x + e
    msg = compressor(corrected)
    state.error = corrected - decompress(msg)
    return msg


def ef21_step(state: Ef21State, x: Tensor, compressor: Compressor) -> CompressedMessage:
    _check_shape(state.g, x)
    g = state.g if state.g is not None else np.zeros_like(x)
    msg = compressor(x - g)
    state.g = g + decompress(msg)
    return msg


def ef21_receive(state: Ef21State, msg: CompressedMessage) -> Tensor:
    delta = decompress(msg)
    _check_shape(state.g, delta)
    g = state.g if state.g is not None else np.zeros_like(delta)
    state.g = g + delta
    return state.g.copy()


def sparse_add(a: Sparse, b: Sparse) -> Sparse:
    if a.shape != b.shape:
        raise ShapeError(f"sparse shapes differ: {a.shape} vs {b.shape}")
    idx = np.union1d(a.indices, b.indices).astype(np.int64)
    vals = np.zeros(idx.size)
    vals[np.searchsorted(idx, a.indices)] += a.values
    vals[np.searchsorted(idx, b.indices)] += b.values
    return Sparse(a.shape, idx, vals)


def efmixed_step(state: EfState, x: Tensor, ratio: float, cast: bool = False) -> Sparse:
    """Send TopK(ratio/2) of the input plus TopK(ratio/2) of the residual.

    Overlapping supports add, so the message can hold fewer than the nominal
    number of coordinates.  Zero residual entries are not sent.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    _check_shape(state.error, x)
    e = state.error if state.error is not None else np.zeros_like(x)
    s = topk(x, ratio / 2)
    r = topk(e, ratio / 2)
    keep = r.values != 0
    r = Sparse(r.shape, r.indices[keep], r.values[keep])
    msg = sparse_add(s, r)
    if cast:
        msg = wire_cast(msg)
    state.error = (x + e) - decompress(msg)
    return msg


@dataclass
class AqsgdState:
    """Per-sample activation buffers, mirrored by sender and receiver.

    ``capacity`` bounds the number of distinct sample ids; the buffer map of
    an unbounded stream would grow without limit.
    """

    role: str = "sender"
    capacity: int | None = None
    buffer: dict = field(default_factory=dict)

    def _admit(self, sample_id: int) -> None:
        if sample_id not in self.buffer and self.capacity is not None and len(self.buffer) >= self.capacity:
            raise ProtocolError(
                f"AQ-SGD buffer capacity {self.capacity} exceeded; a finite indexed dataset is required"
            )

    def nbytes(self) -> int:
        return sum(v.nbytes for v in self.buffer.values())


def aqsgd_send(
    state: AqsgdState, sample_id: int, x: Tensor, compressor: Compressor, cast: bool = False
) -> CompressedMessage:
    """Cold start sends ``x`` densely; later visits send the compressed change.

    The cold-start frame is float32 unless the compressor itself is lossless.
    """
    sample_id = int(sample_id)
    prev = state.buffer.get(sample_id)
    if prev is None:
        state._admit(sample_id)
        msg = dense(x, exact=getattr(compressor, "lossless", False))
        if cast:
            msg = wire_cast(msg)
        state.buffer[sample_id] = decompress(msg)
        return msg
    _check_shape(prev, x)
    msg = compressor(x - prev)
    if isinstance(msg, Dense):
        # a dense frame means "replace" on the receiver, so send the value itself
        msg = Dense(msg.shape, np.array(x, dtype=np.float64).reshape(-1), msg.exact)
        if cast:
            msg = wire_cast(msg)
        state.buffer[sample_id] = decompress(msg)
        return msg
    state.buffer[sample_id] = prev + decompress(msg)
    return msg


def aqsgd_receive(state: AqsgdState, sample_id: int, msg: CompressedMessage) -> Tensor:
    sample_id = int(sample_id)
    if isinstance(msg, Dense):
        state._admit(sample_id)
        state.buffer[sample_id] = decompress(msg)
        return state.buffer[sample_id].copy()
    prev = state.buffer.get(sample_id)
    if prev is None:
        raise ProtocolError(f"compressed update for unknown sample id {sample_id}")
    delta = decompress(msg)
    _check_shape(prev, delta)
    state.buffer[sample_id] = prev + delta
    return state.buffer[sample_id].copy()

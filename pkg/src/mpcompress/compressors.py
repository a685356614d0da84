"""Stateless lossy compressors and the message types they produce.

Messages keep float64 values in memory.  Casting to float32 happens only when
a message is encoded for the wire, or explicitly through :func:`wire_cast`,
which gives the values a receiver would decode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .tensor_core import Tensor, check_finite

COMPRESSOR_KINDS = ("identity", "quantize", "topk")


@dataclass(frozen=True)
class Dense:
    """Uncompressed payload.

    ``exact`` marks a lossless full-precision message (float64 on the wire);
    identity links use it so an uncompressed pipeline matches monolithic training.
    """

    shape: tuple
    values: np.ndarray
    exact: bool = False


@dataclass(frozen=True)
class Quantized:
    shape: tuple
    bits: int
    min: float
    max: float
    codes: np.ndarray


@dataclass(frozen=True)
class Sparse:
    shape: tuple
    indices: np.ndarray
    values: np.ndarray


CompressedMessage = Union[Dense, Quantized, Sparse]
Compressor = Callable[[Tensor], CompressedMessage]


@dataclass(frozen=True)
class CompressorConfig:
    kind: str = "identity"
    bits: int = 8
    ratio: float = 1.0

    def __post_init__(self):
        if self.kind not in COMPRESSOR_KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}")
        if self.kind == "quantize" and not 1 <= self.bits <= 8:
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")
        if self.kind == "topk" and not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")

    @property
    def lossless(self) -> bool:
        return self.kind == "identity"

    def __call__(self, x: Tensor) -> CompressedMessage:
        return compress(x, self)

    def label(self) -> str:
        if self.kind == "quantize":
            return f"q{self.bits}"
        if self.kind == "topk":
            return f"top{self.ratio * 100:g}%"
        return "identity"


def _shape(x: Tensor) -> tuple:
    return tuple(int(d) for d in x.shape)


def dense(x: Tensor, exact: bool = False) -> Dense:
    return Dense(_shape(x), np.array(x, dtype=np.float64).reshape(-1), exact)


def quantize(x: Tensor, bits: int) -> Quantized:
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    check_finite(x, "quantize input")
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    levels = (1 << bits) - 1
    lo = float(flat.min())
    hi = float(flat.max())
    if hi == lo:
        codes = np.zeros(flat.size, dtype=np.uint8)
    else:
        scaled = (flat - lo) / (hi - lo) * levels
        # scaled >= 0, so rounding half up is rounding half away from zero;
        # floor(v + 0.5) would misround 0.49999999999999994
        base = np.floor(scaled)
        rounded = base + (scaled - base >= 0.5)
        codes = np.clip(rounded, 0, levels).astype(np.uint8)
    return Quantized(_shape(x), bits, lo, hi, codes)


def dequantize(msg: Quantized) -> Tensor:
    levels = (1 << msg.bits) - 1
    codes = np.asarray(msg.codes)
    if codes.size and int(codes.max()) > levels:
        raise ValueError(f"code {int(codes.max())} out of range for {msg.bits} bits")
    if msg.min == msg.max:
        return np.full(msg.shape, float(msg.min))
    out = msg.min + codes.astype(np.float64) / levels * (msg.max - msg.min)
    return out.reshape(msg.shape)


def topk_count(n: int, ratio: float) -> int:
    """Number of kept coordinates: max(1, ceil(ratio * n)).

    The 1e-9 guard keeps products such as 0.3 * 10 = 3.0000000000000004 from
    rounding up to an extra coordinate.
    """
    return min(n, max(1, math.ceil(ratio * n - 1e-9)))


def topk_indices(x: Tensor, ratio: float) -> np.ndarray:
    """Ascending flat indices of the largest-|v| entries, ties to the lower index."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValueError("topk of an empty tensor")
    k = topk_count(flat.size, ratio)
    order = np.argsort(-np.abs(flat), kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def topk(x: Tensor, ratio: float) -> Sparse:
    check_finite(x, "topk input")
    idx = topk_indices(x, ratio)
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    return Sparse(_shape(x), idx, flat[idx].copy())


def compress_at_indices(x: Tensor, indices) -> Sparse:
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise IndexError(f"index out of range for tensor of {flat.size} elements")
    if idx.size > 1 and np.any(np.diff(idx) <= 0):
        raise ValueError("indices must be strictly ascending")
    return Sparse(_shape(x), idx.copy(), flat[idx].copy())


def decompress(msg: CompressedMessage) -> Tensor:
    if isinstance(msg, Dense):
        values = np.asarray(msg.values, dtype=np.float64)
        if values.size != math.prod(msg.shape):
            raise ValueError("dense payload length does not match shape")
        return values.reshape(msg.shape).copy()
    if isinstance(msg, Quantized):
        if np.asarray(msg.codes).size != math.prod(msg.shape):
            raise ValueError("code count does not match shape")
        return dequantize(msg)
    if isinstance(msg, Sparse):
        n = math.prod(msg.shape)
        idx = np.asarray(msg.indices, dtype=np.int64)
        if idx.size != np.asarray(msg.values).size:
            raise ValueError("sparse indices and values differ in length")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError("sparse index out of range")
        out = np.zeros(n)
        out[idx] = msg.values
        return out.reshape(msg.shape)
    raise TypeError(f"not a compressed message: {type(msg).__name__}")


def compress(x: Tensor, cfg: CompressorConfig) -> CompressedMessage:
    if cfg.kind == "identity":
        check_finite(x, "identity input")
        return dense(x, exact=True)
    if cfg.kind == "quantize":
        return quantize(x, cfg.bits)
    return topk(x, cfg.ratio)


def _f32(v):
    # overflow to inf is caught by the sender's finiteness check
    with np.errstate(over="ignore"):
        return np.asarray(v, dtype=np.float32).astype(np.float64)


def wire_cast(msg: CompressedMessage) -> CompressedMessage:
    """The message as a receiver decodes it: float32 values, exact Dense untouched."""
    if isinstance(msg, Dense):
        if msg.exact:
            return msg
        return Dense(msg.shape, _f32(msg.values), False)
    if isinstance(msg, Quantized):
        lo, hi = _f32([msg.min, msg.max])
        return Quantized(msg.shape, msg.bits, float(lo), float(hi), msg.codes)
    return Sparse(msg.shape, msg.indices, _f32(msg.values))


@dataclass
class WireCompressor:
    """Callable compressor whose messages are already at wire precision."""

    config: CompressorConfig = field(default_factory=CompressorConfig)

    @property
    def lossless(self) -> bool:
        return self.config.lossless

    def __call__(self, x: Tensor) -> CompressedMessage:
        return wire_cast(compress(x, self.config))

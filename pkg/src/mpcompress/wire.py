"""Bit-exact binary frames for compressed messages.

Frame layout (multi-byte fields little-endian)::

    u8 tag | u8 rank | rank x u32 shape | body

    tag 0  Dense      n x f32
    tag 1  Quantized  u8 bits | f32 min | f32 max | ceil(n*bits/8) bytes of codes,
                      packed LSB-first (code i occupies stream bits [i*bits, (i+1)*bits))
    tag 2  Sparse     u32 nnz | nnz x u32 ascending flat index | nnz x f32 value
    tag 3  Dense64    n x f64  (lossless passthrough used by identity links)

Unused bits of the final code byte must be zero.  See docs/wire_format.md.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .compressors import CompressedMessage, Dense, Quantized, Sparse

TAG_DENSE = 0
TAG_QUANTIZED = 1
TAG_SPARSE = 2
TAG_DENSE64 = 3


class DecodeError(ValueError):
    """Malformed frame; ``kind`` names the failure (e.g. ``"truncated"``)."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {detail}" if detail else kind)


def _header(tag: int, shape: tuple) -> bytes:
    return struct.pack(f"<BB{len(shape)}I", tag, len(shape), *shape)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if codes.size == 0:
        return b""
    bitplanes = (codes[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(bitplanes.reshape(-1), bitorder="little").tobytes()


def unpack_codes(payload: bytes, n: int, bits: int) -> np.ndarray:
    stream = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    if np.any(stream[n * bits :]):
        raise DecodeError("nonzero padding", "bits past the last code must be zero")
    planes = stream[: n * bits].reshape(n, bits).astype(np.uint16)
    return (planes << np.arange(bits, dtype=np.uint16)).sum(axis=1).astype(np.uint8)


def encode(m: CompressedMessage) -> bytes:
    shape = tuple(int(d) for d in m.shape)
    if isinstance(m, Dense):
        if m.exact:
            return _header(TAG_DENSE64, shape) + np.asarray(m.values, dtype="<f8").tobytes()
        return _header(TAG_DENSE, shape) + np.asarray(m.values, dtype="<f4").tobytes()
    if isinstance(m, Quantized):
        return (
            _header(TAG_QUANTIZED, shape)
            + struct.pack("<Bff", m.bits, m.min, m.max)
            + pack_codes(m.codes, m.bits)
        )
    if isinstance(m, Sparse):
        nnz = len(m.indices)
        return (
            _header(TAG_SPARSE, shape)
            + struct.pack("<I", nnz)
            + np.asarray(m.indices, dtype="<u4").tobytes()
            + np.asarray(m.values, dtype="<f4").tobytes()
        )
    raise TypeError(f"cannot encode {type(m).__name__}")


def wire_size(m: CompressedMessage) -> int:
    r = len(m.shape)
    n = math.prod(m.shape)
    if isinstance(m, Dense):
        return 2 + 4 * r + (8 if m.exact else 4) * n
    if isinstance(m, Quantized):
        return 2 + 4 * r + 1 + 8 + (n * m.bits + 7) // 8
    if isinstance(m, Sparse):
        return 2 + 4 * r + 4 + 8 * len(m.indices)
    raise TypeError(f"cannot size {type(m).__name__}")


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, size: int) -> bytes:
        if size < 0 or self.pos + size > len(self.buf):
            raise DecodeError("truncated", f"need {size} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _finite(values: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise DecodeError("non-finite value")
    return values


def decode_from(buf: bytes, pos: int = 0) -> tuple[CompressedMessage, int]:
    """Decode one frame starting at ``pos``; return the message and the end offset."""
    rd = _Reader(bytes(buf), pos)
    tag, rank = rd.unpack("<BB")
    if tag not in (TAG_DENSE, TAG_QUANTIZED, TAG_SPARSE, TAG_DENSE64):
        raise DecodeError("unknown tag", str(tag))
    shape = tuple(rd.unpack(f"<{rank}I")) if rank else ()
    if any(d == 0 for d in shape):
        raise DecodeError("invalid shape", str(shape))
    n = math.prod(shape)

    if tag in (TAG_DENSE, TAG_DENSE64):
        width = 8 if tag == TAG_DENSE64 else 4
        raw = rd.take(width * n)
        values = _finite(np.frombuffer(raw, dtype="<f8" if width == 8 else "<f4")).astype(np.float64)
        return Dense(shape, values, tag == TAG_DENSE64), rd.pos

    if tag == TAG_QUANTIZED:
        bits, lo, hi = rd.unpack("<Bff")
        if not 1 <= bits <= 8:
            raise DecodeError("invalid bits", str(bits))
        _finite(np.array([lo, hi]))
        if lo > hi:
            raise DecodeError("min exceeds max", f"{lo} > {hi}")
        codes = unpack_codes(rd.take((n * bits + 7) // 8), n, bits)
        return Quantized(shape, bits, float(lo), float(hi), codes), rd.pos

    (nnz,) = rd.unpack("<I")
    if nnz > n:
        raise DecodeError("too many entries", f"nnz={nnz} > n={n}")
    indices = np.frombuffer(rd.take(4 * nnz), dtype="<u4").astype(np.int64)
    values = _finite(np.frombuffer(rd.take(4 * nnz), dtype="<f4")).astype(np.float64)
    if nnz > 1 and np.any(np.diff(indices) <= 0):
        raise DecodeError("non-ascending indices")
    if nnz and indices[-1] >= n:
        raise DecodeError("index out of range", f"{indices[-1]} >= {n}")
    return Sparse(shape, indices, values), rd.pos


def decode(b: bytes) -> CompressedMessage:
    msg, end = decode_from(b)
    if end != len(b):
        raise DecodeError("trailing bytes", f"{len(b) - end} unread")
    return msg

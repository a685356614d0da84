"""Dense float64 tensor helpers and seeded randomness.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order, so the flat index of an element is ``sum(idx_i * stride_i)`` exactly as
``numpy.ravel`` produces it.  Every random draw goes through
:func:`make_rng`, which wraps numpy's PCG64 bit generator.  PCG64 output is
specified bit-for-bit and does not depend on the platform.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_tensor(data, shape: Sequence[int] | None = None) -> Tensor:
    t = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t


def check_finite(x: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Return a PCG64 generator; a sequence seeds a derived child stream."""
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def axpy(alpha: float, x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return alpha * x + y


def seeded_normal(
    rng: np.random.Generator, shape: Sequence[int], mean: float = 0.0, std: float = 1.0
) -> Tensor:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        return np.full(tuple(shape), float(mean))
    return rng.normal(mean, std, size=tuple(shape))


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (one coordinate at a time)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad

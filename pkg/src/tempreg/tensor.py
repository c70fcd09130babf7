"""Thin helpers over numpy arrays, which serve as the tensor type everywhere."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidShape, ShapeMismatch

Tensor = np.ndarray


def tensor_new(shape: Sequence[int], fill: float = 0.0, dtype=np.float64) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise InvalidShape(f"invalid tensor shape {shape}")
    return np.full(shape, fill, dtype=dtype)


def elementwise_zip(a: Tensor, b: Tensor, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Tensor:
    """Apply ``f`` to matching elements of two equally shaped tensors.

    ``f`` receives whole arrays, so ufuncs such as ``np.add`` run vectorised.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return np.asarray(f(a, b), dtype=float).reshape(a.shape)


def reduce_sum(a: Tensor) -> float:
    return float(np.sum(a, dtype=np.float64))

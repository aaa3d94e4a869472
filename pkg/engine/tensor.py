"""
Tensors and trainable parameters.

A tensor is a row-major numpy array; image batches are (batch, channel,
height, width). Training runs in float32, gradient checks in float64.
"""
from dataclasses import dataclass, field

import numpy as np

from engine.errors import NonFiniteError, ShapeError

DTYPES = {32: np.float32, 64: np.float64}


def resolve_dtype(precision) -> np.dtype:
    """Accept 32/64 or a numpy dtype."""
    if precision in DTYPES:
        return np.dtype(DTYPES[precision])
    dtype = np.dtype(precision)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision: {precision}")
    return dtype


def check_finite(array: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s) in tensor of shape {array.shape}")
    return array


def expect_shape(array: np.ndarray, shape: tuple, what: str):
    """Raise ShapeError unless array matches shape (None matches any size)."""
    if array.ndim != len(shape) or any(s is not None and a != s for a, s in zip(array.shape, shape)):
        raise ShapeError(f"{what}: expected shape {shape}, got {array.shape}")


@dataclass
class Parameter:
    """A trainable tensor with its gradient buffer."""

    name: str
    value: np.ndarray
    role: str = "weight"  # weight | bias
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.role not in ("weight", "bias"):
            raise ValueError(f"unknown parameter role: {self.role}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0

    def accumulate(self, grad: np.ndarray):
        if grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: gradient shape {grad.shape} != {self.value.shape}")
        self.grad += grad

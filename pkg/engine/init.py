"""Glorot/Xavier uniform initialization."""
import numpy as np


def glorot_init(fan_in: int, fan_out: int, scale_coefficient: float, rng: np.random.Generator,
                shape: tuple = None, dtype=np.float32) -> np.ndarray:
    """
    Sample U(-a, a) with a = scale_coefficient * sqrt(6 / (fan_in + fan_out)).

    shape defaults to (fan_in, fan_out), the affine weight layout.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fans must be positive, got fan_in={fan_in}, fan_out={fan_out}")
    if scale_coefficient <= 0:
        raise ValueError(f"scale_coefficient must be positive, got {scale_coefficient}")
    if shape is None:
        shape = (fan_in, fan_out)
    bound = scale_coefficient * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)

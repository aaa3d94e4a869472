"""
Layer operations: same-padded convolution, max-pooling, affine, dropout.

Each op has a functional forward/backward pair working on numpy arrays, and
a Layer class that owns its Parameters and caches what backward needs.
"""
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from engine.errors import ShapeError
from engine.init import glorot_init
from engine.tensor import Parameter, expect_shape

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "linear")


# ---------------------------------------------------------------------------
# Convolution (stride 1, "same" zero padding)
# ---------------------------------------------------------------------------

def _same_windows(x: np.ndarray, kernel: int) -> np.ndarray:
    pad = kernel // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (N, C, H, W, k, k) view, no copy
    return sliding_window_view(padded, (kernel, kernel), axis=(2, 3))


def _check_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be (batch, channel, height, width), got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weights must be (out, in, k, k), got {weight.shape}")
    if weight.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {weight.shape[2]}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weights expect {weight.shape[1]}")
    expect_shape(bias, (weight.shape[0],), "conv2d bias")


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Cross-correlation with same padding; output spatial size equals input."""
    _check_conv(x, weight, bias)
    windows = _same_windows(x, weight.shape[2])
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, O)
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray) -> tuple:
    """Return (grad_input, grad_weight, grad_bias)."""
    windows = _same_windows(x, weight.shape[2])
    grad_weight = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    # transpose of a same-padded conv is a same-padded conv with the flipped kernel
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_input = conv2d_forward(grad_out, flipped, np.zeros(flipped.shape[0], dtype=grad_out.dtype))
    return grad_input, grad_weight.astype(weight.dtype), grad_bias.astype(weight.dtype)


# ---------------------------------------------------------------------------
# Max-pooling (stride == window, remainder truncated)
# ---------------------------------------------------------------------------

def _pool_blocks(x: np.ndarray, window: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    blocks = x[:, :, :ho * window, :wo * window].reshape(n, c, ho, window, wo, window)
    return blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)


def maxpool2d_forward(x: np.ndarray, window: int) -> tuple:
    """Return (output, argmax index within each window)."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be 4-D, got {x.shape}")
    if window < 1 or window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"maxpool2d: window {window} larger than spatial size {x.shape[2:]}")
    blocks = _pool_blocks(x, window)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2d_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape: tuple, window: int) -> np.ndarray:
    """Route each upstream gradient to the single argmax input of its window."""
    n, c, h, w = input_shape
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    routed = np.zeros((n, c, ho, wo, window * window), dtype=grad_out.dtype)
    np.put_along_axis(routed, argmax[..., None], grad_out[..., None], axis=-1)
    routed = routed.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    grad_input = np.zeros(input_shape, dtype=grad_out.dtype)
    grad_input[:, :, :ho * window, :wo * window] = routed.reshape(n, c, ho * window, wo * window)
    return grad_input


def maxpool2d(x: np.ndarray, window: int) -> np.ndarray:
    return maxpool2d_forward(x, window)[0]


# ---------------------------------------------------------------------------
# Affine
# ---------------------------------------------------------------------------

def affine_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, activation: str = "relu") -> np.ndarray:
    """out = act(x . W + b), W laid out (in_features, out_features)."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation: {activation}")
    if x.ndim != 2:
        raise ShapeError(f"affine: input must be flattened to (batch, features), got {x.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input has {x.shape[1]} features, weights expect {weight.shape[0]}")
    expect_shape(bias, (weight.shape[1],), "affine bias")
    out = x @ weight + bias
    if activation == "relu":
        out = np.maximum(out, 0)
    return out


def affine_backward(x: np.ndarray, weight: np.ndarray, out: np.ndarray, grad_out: np.ndarray,
                    activation: str = "relu") -> tuple:
    """Return (grad_input, grad_weight, grad_bias)."""
    if activation == "relu":
        grad_out = grad_out * (out > 0)
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# Dropout (inverted scaling)
# ---------------------------------------------------------------------------

def check_rate(rate: float):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator, training: bool = True) -> tuple:
    """Return (output, mask); the mask is None when dropout is a no-op."""
    check_rate(rate)
    if not training or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


# ---------------------------------------------------------------------------
# Layer objects
# ---------------------------------------------------------------------------

class Layer:
    """Base class: forward caches, backward returns the input gradient."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def parameters(self) -> list:
        return []

    def forward(self, x: np.ndarray, training: bool = False, rng: np.random.Generator = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, name: str, in_channels: int, filters: int, kernel: int, rng: np.random.Generator,
                 init_scale: float = 1.0, dtype=np.float32):
        super().__init__(name)
        self.kernel = kernel
        fan_in, fan_out = in_channels * kernel * kernel, filters * kernel * kernel
        self.weight = Parameter(f"{name}.weight", glorot_init(
            fan_in, fan_out, init_scale, rng, shape=(filters, in_channels, kernel, kernel), dtype=dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(filters, dtype=dtype), role="bias")
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False, rng=None):
        self._x = x
        return conv2d_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad):
        grad_input, grad_weight, grad_bias = conv2d_backward(self._x, self.weight.value, grad)
        self.weight.accumulate(grad_weight)
        self.bias.accumulate(grad_bias)
        return grad_input


class MaxPool2D(Layer):
    kind = "pool"

    def __init__(self, name: str, window: int):
        super().__init__(name)
        self.window = window
        self._shape = None
        self._argmax = None

    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        out, self._argmax = maxpool2d_forward(x, self.window)
        return out

    def backward(self, grad):
        return maxpool2d_backward(grad, self._argmax, self._shape, self.window)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name: str):
        super().__init__(name)
        self._shape = None

    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Affine(Layer):
    kind = "affine"

    def __init__(self, name: str, in_features: int, units: int, activation: str, rng: np.random.Generator,
                 init_scale: float = 1.0, dtype=np.float32):
        super().__init__(name)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation: {activation}")
        self.activation = activation
        self.weight = Parameter(f"{name}.weight", glorot_init(in_features, units, init_scale, rng, dtype=dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(units, dtype=dtype), role="bias")
        self._x = None
        self._out = None

    @classmethod
    def from_arrays(cls, name: str, weight: np.ndarray, bias: np.ndarray, activation: str) -> "Affine":
        layer = cls.__new__(cls)
        Layer.__init__(layer, name)
        layer.activation = activation
        layer.weight = Parameter(f"{name}.weight", weight)
        layer.bias = Parameter(f"{name}.bias", bias, role="bias")
        layer._x = layer._out = None
        return layer

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def units(self) -> int:
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False, rng=None):
        self._x = x
        self._out = affine_forward(x, self.weight.value, self.bias.value, self.activation)
        return self._out

    def backward(self, grad):
        grad_input, grad_weight, grad_bias = affine_backward(
            self._x, self.weight.value, self._out, grad, self.activation)
        self.weight.accumulate(grad_weight)
        self.bias.accumulate(grad_bias)
        return grad_input


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name: str, rate: float):
        super().__init__(name)
        check_rate(rate)
        self.rate = rate
        self._mask = None

    def forward(self, x, training=False, rng=None):
        if training and self.rate > 0 and rng is None:
            raise ValueError(f"{self.name}: training-mode dropout needs an rng stream")
        out, self._mask = dropout(x, self.rate, rng, training)
        return out

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask

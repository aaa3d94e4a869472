"""
Image augmentations: mirror, crop/scale jitter, HSV jitter.

Every augmentation takes an explicit rng. augment_batch derives one stream
per (seed, epoch, image index), so results do not depend on batch layout or
worker order. Chain order: mirror -> crop/scale -> HSV; per-image
normalization happens later, at load time.
"""
import struct
from dataclasses import asdict, dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from engine.rng import derive_stream

IMAGE_SIZE = 32
EDGE_PAD = 8
_CONFIG_STRUCT = struct.Struct("<6d2I")


@dataclass(frozen=True)
class AugmentConfig:
    d_h: float = 0.0
    d_s: float = 0.0
    d_v: float = 0.0
    a_s: float = 0.0
    a_v: float = 0.0
    mirror_prob: float = 0.5
    crop_min: int = 24
    crop_max: int = 32

    def __post_init__(self):
        for name in ("d_h", "d_s", "d_v", "a_s", "a_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ValueError(f"mirror_prob must lie in [0, 1], got {self.mirror_prob}")
        if not 1 <= self.crop_min <= self.crop_max <= IMAGE_SIZE:
            raise ValueError(f"crop range [{self.crop_min}, {self.crop_max}] invalid")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(mirror_prob=0.0, crop_min=IMAGE_SIZE, crop_max=IMAGE_SIZE)

    @classmethod
    def best_model(cls) -> "AugmentConfig":
        """Settings of the best single teacher, used for transfer sets."""
        return cls(d_h=0.06, d_s=0.26, d_v=0.20, a_s=0.21, a_v=0.13)

    @classmethod
    def from_point(cls, point: dict) -> "AugmentConfig":
        return cls(d_h=point["D_h"], d_s=point["D_s"], d_v=point["D_v"], a_s=point["A_s"], a_v=point["A_v"])

    def to_bytes(self) -> bytes:
        return _CONFIG_STRUCT.pack(self.d_h, self.d_s, self.d_v, self.a_s, self.a_v, self.mirror_prob,
                                   self.crop_min, self.crop_max)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AugmentConfig":
        return cls(*_CONFIG_STRUCT.unpack(raw))

    def to_dict(self) -> dict:
        return asdict(self)


CONFIG_BYTES = _CONFIG_STRUCT.size


def mirror(image: np.ndarray, rng: np.random.Generator, prob: float = 0.5, flip: bool = None) -> np.ndarray:
    """Left-right flip with probability prob (or as forced by flip)."""
    draw = rng.random() < prob
    if flip is None:
        flip = draw
    return image[:, :, ::-1].copy() if flip else image.copy()


def spline_resize(image: np.ndarray, size: int = IMAGE_SIZE, order: int = 3) -> np.ndarray:
    """Resize each channel of a (C, H, W) image to (C, size, size) by spline interpolation.

    Corners map to corners. The borders are first extended by odd reflection,
    which continues a linear gradient exactly, so cubic and linear agree on ramps
    all the way to the edge.
    """
    rows, cols = image.shape[1], image.shape[2]
    if rows == size and cols == size:
        return image.copy()
    pad = ((0, 0), (EDGE_PAD, EDGE_PAD), (EDGE_PAD, EDGE_PAD))
    padded = np.pad(image.astype(np.float64), pad, mode="reflect", reflect_type="odd")
    grid = np.meshgrid(EDGE_PAD + np.linspace(0, rows - 1, size), EDGE_PAD + np.linspace(0, cols - 1, size),
                       indexing="ij")
    out = np.stack([ndimage.map_coordinates(channel, grid, order=order, mode="mirror") for channel in padded])
    return out.astype(image.dtype)


def crop_scale_jitter(image: np.ndarray, rng: np.random.Generator, crop_min: int = 24,
                      crop_max: int = IMAGE_SIZE) -> np.ndarray:
    """Random S x S window (S uniform on crop_min..crop_max) scaled back to 32 x 32 with a cubic spline."""
    side = image.shape[1]
    crop = int(rng.integers(crop_min, crop_max + 1))
    x = int(rng.integers(0, side - crop + 1))
    y = int(rng.integers(0, side - crop + 1))
    window = image[:, x:x + crop, y:y + crop]
    return np.clip(spline_resize(window, side, order=3), 0.0, 1.0)


def hsv_jitter(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Shift hue, shift and scale saturation and value, by uniform random draws."""
    delta_h = rng.uniform(-config.d_h, config.d_h)
    delta_s = rng.uniform(-config.d_s, config.d_s)
    delta_v = rng.uniform(-config.d_v, config.d_v)
    scale_s = rng.uniform(1.0 / (1.0 + config.a_s), 1.0 + config.a_s)
    scale_v = rng.uniform(1.0 / (1.0 + config.a_v), 1.0 + config.a_v)

    rgb = np.clip(image.astype(np.float64), 0.0, 1.0).transpose(1, 2, 0)
    hsv = rgb_to_hsv(rgb)
    hsv[..., 0] = np.mod(hsv[..., 0] + delta_h, 1.0)
    hsv[..., 1] = np.clip(scale_s * hsv[..., 1] + delta_s, 0.0, 1.0)
    hsv[..., 2] = np.clip(scale_v * hsv[..., 2] + delta_v, 0.0, 1.0)
    out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0).transpose(2, 0, 1)
    return np.ascontiguousarray(out, dtype=image.dtype)


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    image = mirror(image, rng, config.mirror_prob)
    image = crop_scale_jitter(image, rng, config.crop_min, config.crop_max)
    return hsv_jitter(image, config, rng)


def augment_batch(images: np.ndarray, config: AugmentConfig, seed: int, epoch: int, indices) -> np.ndarray:
    """Augment a batch; image i uses the stream (seed, "augment", epoch, indices[i])."""
    out = np.empty_like(images)
    for i, index in enumerate(indices):
        out[i] = augment(images[i], config, derive_stream(seed, "augment", epoch, int(index)))
    return out

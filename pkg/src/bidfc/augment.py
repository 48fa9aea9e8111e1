"""Stochastic augmentations for single-channel images in [0, 1].

Six transforms are provided: crop-with-resize (CR), random rotation (RR),
color jitter (CJ), random horizontal flip (RHF), Gaussian noise (GN) and
Gaussian blur (GB). ``apply_pipeline`` composes the enabled subset in the
fixed order CR -> RR -> CJ -> RHF -> GN -> GB. Every transform is a pure
function of (image, parameters, rng state) and always returns a new array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, InputError

TRANSFORM_ORDER = ("CR", "RR", "CJ", "RHF", "GN", "GB")

DEFAULT_ENABLED = frozenset({"CR", "RR", "CJ", "RHF", "GN"})


@dataclass
class AugmentConfig:
    """Parameters of the augmentation pipeline.

    Defaults: crop area fraction in [0.85, 1.0] resized to 64x64, rotation
    up to +-30 degrees, brightness/contrast jitter 0.4 (saturation 0 for
    grayscale), flip probability 0.5, additive unit-variance noise scaled
    by 0.1, and blur radius in [0.1, 2.0]. Blur is disabled by default;
    the default combination is {CR, RR, CJ, RHF, GN}.
    """

    crop_scale: tuple[float, float] = (0.85, 1.0)
    out_size: int = 64
    max_degrees: float = 30.0
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.0
    flip_prob: float = 0.5
    noise_density: float = 0.1
    blur_radius: tuple[float, float] = (0.1, 2.0)
    enabled: frozenset[str] = field(default_factory=lambda: DEFAULT_ENABLED)

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        self.blur_radius = tuple(self.blur_radius)
        self.enabled = frozenset(self.enabled)

    def validate(self) -> None:
        _check_scale(self.crop_scale)
        if self.out_size < 1:
            raise ConfigurationError(f"out_size must be >= 1, got {self.out_size}")
        if self.max_degrees < 0:
            raise ConfigurationError(f"max_degrees must be >= 0, got {self.max_degrees}")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.noise_density < 0:
            raise ConfigurationError(f"noise_density must be >= 0, got {self.noise_density}")
        lo, hi = self.blur_radius
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"blur_radius must be an ordered nonnegative interval, got {self.blur_radius}")
        unknown = self.enabled - set(TRANSFORM_ORDER)
        if unknown:
            raise ConfigurationError(f"unknown transform identifiers: {sorted(unknown)}")


def as_image(img) -> np.ndarray:
    """Coerce to a 2-D float64 array; reject anything that is not an image grid."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise InputError(f"expected a nonempty 2-D image, got shape {arr.shape}")
    return arr


def _check_scale(scale) -> None:
    lo, hi = scale
    if not (0.0 < lo <= hi <= 1.0):
        raise ConfigurationError(f"crop scale must satisfy 0 < a <= b <= 1, got {scale}")


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel center alignment.

    Equal input and output sizes reproduce the input exactly.
    """
    img = as_image(img)
    h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y0 = np.clip(y0.astype(np.int64), 0, h - 1)
    x0 = np.clip(x0.astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    top = img[y0[:, None], x0[None, :]] * (1 - wx) + img[y0[:, None], x1[None, :]] * wx
    bot = img[y1[:, None], x0[None, :]] * (1 - wx) + img[y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def sample_crop_window(height: int, width: int, scale, rng: np.random.Generator):
    """Draw (top, left, side) of a square crop window.

    The window's area fraction of the largest inscribed square is uniform in
    ``scale``; the side is rounded up so the fraction is never undershot, and
    the position is uniform over valid placements.
    """
    _check_scale(scale)
    frac = rng.uniform(scale[0], scale[1])
    base = min(height, width)
    side = min(base, max(1, math.ceil(math.sqrt(frac) * base)))
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    return top, left, side


def crop_resize(img, scale, out_size: int, rng: np.random.Generator) -> np.ndarray:
    """Crop a random square window with area fraction in ``scale`` and resize."""
    img = as_image(img)
    if out_size < 1:
        raise ConfigurationError(f"out_size must be >= 1, got {out_size}")
    h, w = img.shape
    top, left, side = sample_crop_window(h, w, scale, rng)
    window = img[top:top + side, left:left + side]
    if window.shape == (out_size, out_size):
        return window.copy()
    return resize_bilinear(window, out_size, out_size)


def rotate(img, degrees: float) -> np.ndarray:
    """Rotate about the image center by a fixed angle (bilinear, zero fill)."""
    img = as_image(img)
    h, w = img.shape
    # 0 and 180 degrees are exact index permutations; skip interpolation
    quarter = degrees % 360.0
    if quarter == 0.0:
        return img.copy()
    if quarter == 180.0:
        return img[::-1, ::-1].copy()
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: rotate output coordinates by -theta to find the source pixel
    src_y = cos_t * dy + sin_t * dx + cy
    src_x = -sin_t * dy + cos_t * dx + cx
    # zero-pad by one pixel so out-of-frame samples blend toward 0
    padded = np.zeros((h + 2, w + 2), dtype=img.dtype)
    padded[1:-1, 1:-1] = img
    sy = np.clip(src_y + 1, 0, h + 1)
    sx = np.clip(src_x + 1, 0, w + 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.clip(y0, 0, h)
    x0 = np.clip(x0, 0, w)
    wy = sy - y0
    wx = sx - x0
    out = (padded[y0, x0] * (1 - wy) * (1 - wx)
           + padded[y0, x0 + 1] * (1 - wy) * wx
           + padded[y0 + 1, x0] * wy * (1 - wx)
           + padded[y0 + 1, x0 + 1] * wy * wx)
    # fully out-of-frame samples are filled with 0
    inside = (src_y >= -1) & (src_y <= h) & (src_x >= -1) & (src_x <= w)
    return np.where(inside, out, 0.0)


def random_rotate(img, max_degrees: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate by an angle uniform in [-max_degrees, +max_degrees]."""
    if max_degrees < 0:
        raise ConfigurationError(f"max_degrees must be >= 0, got {max_degrees}")
    angle = rng.uniform(-max_degrees, max_degrees)
    return rotate(img, angle)


def adjust_brightness_contrast(img, brightness_factor: float, contrast_factor: float) -> np.ndarray:
    """Scale pixels by the brightness factor, then blend with the image mean
    by the contrast factor; the result is clamped to [0, 1]."""
    img = as_image(img)
    out = img * brightness_factor
    mean = out.mean()
    out = mean + contrast_factor * (out - mean)
    return np.clip(out, 0.0, 1.0)


def color_jitter(img, brightness: float, contrast: float, saturation: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Random brightness/contrast jitter.

    Factors are drawn uniformly from [max(0, 1-x), 1+x]. Saturation is drawn
    for rng-stream stability but has no effect on single-channel images.
    """
    for name, val in (("brightness", brightness), ("contrast", contrast), ("saturation", saturation)):
        if val < 0:
            raise ConfigurationError(f"{name} must be >= 0, got {val}")
    bf = rng.uniform(max(0.0, 1.0 - brightness), 1.0 + brightness)
    cf = rng.uniform(max(0.0, 1.0 - contrast), 1.0 + contrast)
    rng.uniform(max(0.0, 1.0 - saturation), 1.0 + saturation)  # saturation: no-op on grayscale
    return adjust_brightness_contrast(img, bf, cf)


def horizontal_flip(img, p: float, rng: np.random.Generator) -> np.ndarray:
    """Reverse the columns with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"flip probability must be in [0, 1], got {p}")
    img = as_image(img)
    if rng.uniform() < p:
        return img[:, ::-1].copy()
    return img.copy()


def gaussian_noise(img, density: float, rng: np.random.Generator) -> np.ndarray:
    """Add density-scaled standard normal noise per pixel and clamp to [0, 1]."""
    if density < 0:
        raise ConfigurationError(f"noise density must be >= 0, got {density}")
    img = as_image(img)
    if density == 0:
        return img.copy()
    noise = rng.standard_normal(img.shape)
    return np.clip(img + density * noise, 0.0, 1.0)


def gaussian_kernel(radius: float) -> np.ndarray:
    """Isotropic Gaussian kernel with sigma = radius, truncated at 3*radius
    (at least 3x3), normalized to sum 1."""
    half = max(1, math.ceil(3.0 * radius))
    coords = np.arange(-half, half + 1, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    kernel = np.exp(-(yy ** 2 + xx ** 2) / (2.0 * radius ** 2))
    return kernel / kernel.sum()


def blur(img, radius: float) -> np.ndarray:
    """Convolve with a normalized Gaussian kernel, reflective boundaries."""
    if radius < 0:
        raise ConfigurationError(f"blur radius must be >= 0, got {radius}")
    img = as_image(img)
    if radius == 0:
        return img.copy()
    return ndimage.convolve(img, gaussian_kernel(radius), mode="reflect")


def gaussian_blur(img, radius, rng: np.random.Generator) -> np.ndarray:
    """Blur with a radius drawn uniformly from the given interval."""
    lo, hi = radius
    if lo < 0 or hi < lo:
        raise ConfigurationError(f"blur radius interval must be ordered and nonnegative, got {radius}")
    r = rng.uniform(lo, hi)
    return blur(img, r)


def apply_pipeline(img, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the enabled transforms in fixed order.

    Output is always cfg.out_size x cfg.out_size with pixels in [0, 1]; when
    CR is disabled, a plain bilinear resize enforces the shape contract.
    """
    cfg.validate()
    img = as_image(img)
    if "CR" in cfg.enabled:
        img = crop_resize(img, cfg.crop_scale, cfg.out_size, rng)
    elif img.shape != (cfg.out_size, cfg.out_size):
        img = resize_bilinear(img, cfg.out_size, cfg.out_size)
    if "RR" in cfg.enabled:
        img = random_rotate(img, cfg.max_degrees, rng)
    if "CJ" in cfg.enabled:
        img = color_jitter(img, cfg.brightness, cfg.contrast, cfg.saturation, rng)
    if "RHF" in cfg.enabled:
        img = horizontal_flip(img, cfg.flip_prob, rng)
    if "GN" in cfg.enabled:
        img = gaussian_noise(img, cfg.noise_density, rng)
    if "GB" in cfg.enabled:
        img = gaussian_blur(img, cfg.blur_radius, rng)
    return np.clip(img, 0.0, 1.0)

"""Photometric view generation.

Only colour and blur operations are used: views keep the exact geometry of
the source page so one layout mask serves both of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .maskgen import to_grayscale


@dataclass
class JitterStrengths:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1


@dataclass
class AugmentConfig:
    blur_prob: float = 0.5
    jitter_prob: float = 0.8
    drop_prob: float = 0.2
    solarize_prob: float = 0.2
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    jitter_strengths: JitterStrengths = field(default_factory=JitterStrengths)
    solarize_threshold: int = 128
    # solarization is applied to the second view only, SimCLR/BYOL style
    solarize_second_view_only: bool = True

    def __post_init__(self):
        if isinstance(self.jitter_strengths, dict):
            self.jitter_strengths = JitterStrengths(**self.jitter_strengths)
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        for name in ("blur_prob", "jitter_prob", "drop_prob", "solarize_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.blur_sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"blur_sigma_range must be positive and ordered, got {self.blur_sigma_range}")
        if not 0 <= self.solarize_threshold <= 256:
            raise ValueError("solarize_threshold must be in [0, 256]")


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    k = gaussian_kernel(sigma)
    x = img.astype(np.float64)
    x = ndimage.convolve1d(x, k, axis=0, mode="reflect")
    x = ndimage.convolve1d(x, k, axis=1, mode="reflect")
    return _to_uint8(x)


def _luma(x: np.ndarray) -> np.ndarray:
    return x @ np.array([0.2126, 0.7152, 0.0722])


def _adjust(x, op, amount):
    if op == "brightness":
        return np.clip(x * amount, 0, 255)
    if op == "contrast":
        mean = _luma(x).mean()
        return np.clip((x - mean) * amount + mean, 0, 255)
    if op == "saturation":
        gray = _luma(x)[..., None]
        return np.clip((x - gray) * amount + gray, 0, 255)
    hsv = rgb_to_hsv(x / 255.0)
    hsv[..., 0] = (hsv[..., 0] + amount) % 1.0
    return np.clip(hsv_to_rgb(hsv) * 255.0, 0, 255)


def sample_jitter(strengths: JitterStrengths, rng: np.random.Generator) -> list[tuple[str, float]]:
    """Draw jitter factors and a random application order."""
    params = {
        "brightness": rng.uniform(max(0.0, 1 - strengths.brightness), 1 + strengths.brightness),
        "contrast": rng.uniform(max(0.0, 1 - strengths.contrast), 1 + strengths.contrast),
        "saturation": rng.uniform(max(0.0, 1 - strengths.saturation), 1 + strengths.saturation),
        "hue": rng.uniform(-strengths.hue, strengths.hue),
    }
    order = rng.permutation(4)
    names = ("brightness", "contrast", "saturation", "hue")
    return [(names[i], float(params[names[i]])) for i in order]


def apply_jitter(img: np.ndarray, ops: list[tuple[str, float]]) -> np.ndarray:
    x = img.astype(np.float64)
    for op, amount in ops:
        if (op == "hue" and amount == 0.0) or (op != "hue" and amount == 1.0):
            continue
        x = _adjust(x, op, amount)
    return _to_uint8(x)


def color_jitter(img: np.ndarray, strengths: JitterStrengths, rng: np.random.Generator) -> np.ndarray:
    return apply_jitter(img, sample_jitter(strengths, rng))


def color_drop(img: np.ndarray) -> np.ndarray:
    gray = to_grayscale(img)
    return np.repeat(gray[..., None], 3, axis=2)


def solarize(img: np.ndarray, threshold: int = 128) -> np.ndarray:
    img = np.asarray(img)
    return np.where(img >= threshold, 255 - img, img).astype(np.uint8)


def augment_view(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
                 allow_solarize: bool = True) -> np.ndarray:
    """One random view: jitter -> drop -> blur -> solarize, each gated by its probability."""
    x = img
    if rng.random() < cfg.jitter_prob:
        x = color_jitter(x, cfg.jitter_strengths, rng)
    if rng.random() < cfg.drop_prob:
        x = color_drop(x)
    if rng.random() < cfg.blur_prob:
        x = gaussian_blur(x, rng.uniform(*cfg.blur_sigma_range))
    if allow_solarize and rng.random() < cfg.solarize_prob:
        x = solarize(x, cfg.solarize_threshold)
    return x.copy() if x is img else x


def make_view_pair(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    v1 = augment_view(img, cfg, rng, allow_solarize=not cfg.solarize_second_view_only)
    v2 = augment_view(img, cfg, rng)
    return v1, v2

"""Screenshot standardization: header crop, whitespace trim, min-max stretch, sharpen."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from ._accel import njit
from .errors import ConfigError, CropTooLarge
from .render import Screenshot


@dataclass(frozen=True)
class PreprocessConfig:
    header_crop_px: int = 0
    bg_threshold: int = 248
    bg_row_fraction: float = 0.995
    margin_px: int = 8
    sharpen_sigma: float = 1.0
    sharpen_amount: float = 1.0
    sharpen_edge_threshold: float = 4.0
    min_size_px: int = 32

    def validate(self) -> None:
        if not 0 <= self.bg_threshold <= 255:
            raise ConfigError("imgproc.bg_threshold must be within 0..255")
        if not 0 < self.bg_row_fraction <= 1:
            raise ConfigError("imgproc.bg_row_fraction must be in (0, 1]")
        if self.sharpen_sigma <= 0:
            raise ConfigError("imgproc.sharpen_sigma must be > 0")
        if self.header_crop_px < 0 or self.margin_px < 0 or self.min_size_px < 0:
            raise ConfigError("imgproc pixel counts must be >= 0")


def normalize_minmax(img: Screenshot) -> Screenshot:
    """Global (all channels) min-max stretch to 0..255; constant images become 0."""
    px = img.pixels
    lo = int(px.min())
    hi = int(px.max())
    if hi == lo:
        return img.with_pixels(np.zeros_like(px))
    # round((v - lo) * 255 / (hi - lo)) half up, exactly, in integers
    span = hi - lo
    out = (2 * 255 * (px.astype(np.int64) - lo) + span) // (2 * span)
    return img.with_pixels(out.astype(np.uint8))


def gaussian_weights(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(taps * taps) / (2.0 * sigma * sigma))
    return w / w.sum()


@njit
def sharpen_nb(px, weights, amount, threshold):
    h, w, ch = px.shape
    r = weights.shape[0] // 2
    tmp = np.zeros((h, w, ch), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            for c in range(ch):
                acc = 0.0
                for j in range(-r, r + 1):
                    xx = min(max(x + j, 0), w - 1)
                    acc += weights[j + r] * np.float64(px[y, xx, c])
                tmp[y, x, c] = acc
    out = np.empty((h, w, ch), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            for c in range(ch):
                acc = 0.0
                for i in range(-r, r + 1):
                    yy = min(max(y + i, 0), h - 1)
                    acc += weights[i + r] * tmp[yy, x, c]
                orig = np.float64(px[y, x, c])
                delta = orig - acc
                if abs(delta) > threshold:
                    v = orig + amount * delta
                    v = min(max(v, 0.0), 255.0)
                    out[y, x, c] = np.uint8(math.floor(v + 0.5))
                else:
                    out[y, x, c] = px[y, x, c]
    return out


def sharpen_np(px, weights, amount, threshold):
    h, w, _ = px.shape
    r = weights.shape[0] // 2
    src = px.astype(np.float64)
    padded = np.pad(src, ((0, 0), (r, r), (0, 0)), mode="edge")
    tmp = np.zeros_like(src)
    for k in range(2 * r + 1):
        tmp += weights[k] * padded[:, k:k + w, :]
    padded = np.pad(tmp, ((r, r), (0, 0), (0, 0)), mode="edge")
    blur = np.zeros_like(src)
    for k in range(2 * r + 1):
        blur += weights[k] * padded[k:k + h, :, :]
    delta = src - blur
    boosted = np.clip(src + amount * delta, 0.0, 255.0)
    out = np.where(np.abs(delta) > threshold, np.floor(boosted + 0.5), src)
    return out.astype(np.uint8)


def adaptive_sharpen(img: Screenshot, cfg: PreprocessConfig) -> Screenshot:
    """Thresholded unsharp mask: only pixels that differ from their Gaussian
    neighbourhood by more than ``sharpen_edge_threshold`` are boosted, so flat
    regions (backgrounds, solid bands) pass through untouched.
    """
    if cfg.sharpen_amount == 0:
        return img
    weights = gaussian_weights(cfg.sharpen_sigma)
    kernel = sharpen_nb if _accel.USE_NUMBA else sharpen_np
    out = kernel(img.pixels, weights, float(cfg.sharpen_amount), float(cfg.sharpen_edge_threshold))
    return img.with_pixels(out)


def _trim_bounds(mask: np.ndarray, fraction: float) -> tuple[int, int] | None:
    """First/last index (inclusive) along axis 0 whose background share is below ``fraction``."""
    keep = np.flatnonzero(mask.mean(axis=1) < fraction)
    if keep.size == 0:
        return None
    return int(keep[0]), int(keep[-1])


def trim_whitespace(img: Screenshot, cfg: PreprocessConfig) -> Screenshot:
    px = img.pixels
    h, w, _ = px.shape
    bg = np.all(px >= cfg.bg_threshold, axis=2)
    rows = _trim_bounds(bg, cfg.bg_row_fraction)
    if rows is None:
        return img
    top, bottom = rows
    cols = _trim_bounds(bg[top:bottom + 1].T, cfg.bg_row_fraction)
    if cols is None:
        return img
    left, right = cols
    if (top, bottom, left, right) == (0, h - 1, 0, w - 1):
        return img
    # margin only on sides that were actually trimmed, never past the original edge
    m_top = min(cfg.margin_px, top)
    m_bottom = min(cfg.margin_px, h - 1 - bottom)
    m_left = min(cfg.margin_px, left)
    m_right = min(cfg.margin_px, w - 1 - right)
    out_h = (bottom - top + 1) + m_top + m_bottom
    out_w = (right - left + 1) + m_left + m_right
    if out_h < cfg.min_size_px or out_w < cfg.min_size_px:
        return img
    out = np.full((out_h, out_w, 3), 255, dtype=np.uint8)
    out[m_top:m_top + bottom - top + 1, m_left:m_left + right - left + 1] = px[top:bottom + 1, left:right + 1]
    return img.with_pixels(out)


def crop_header(img: Screenshot, cfg: PreprocessConfig) -> Screenshot:
    n = cfg.header_crop_px
    if n >= img.height:
        raise CropTooLarge(f"header_crop_px={n} >= image height {img.height}")
    if n == 0:
        return img
    return img.with_pixels(img.pixels[n:])


def preprocess(img: Screenshot, cfg: PreprocessConfig) -> Screenshot:
    img = crop_header(img, cfg)
    img = trim_whitespace(img, cfg)
    img = normalize_minmax(img)
    return adaptive_sharpen(img, cfg)

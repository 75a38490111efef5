"""Color constancy, resizing and seeded geometric augmentation.

Images are float64 arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    return arr


def _minkowski_means(img: np.ndarray, p: float) -> np.ndarray:
    img = as_image(img)
    if p < 1:
        raise ValueError(f"Minkowski norm p must be >= 1, got {p}")
    flat = img.reshape(-1, 3)
    peak = flat.max(axis=0)
    if not np.all(peak > 0):
        raise ValueError("degenerate illuminant")
    # scaling by the channel peak keeps x**p clear of underflow
    return peak * np.mean((flat / peak) ** p, axis=0) ** (1.0 / p)


def illuminant(img: np.ndarray, p: float = 6.0) -> np.ndarray:
    """Minkowski-``p`` illuminant estimate, L2-normalized."""
    e = _minkowski_means(img, p)
    return e / np.linalg.norm(e)


def shades_of_gray(img: np.ndarray, p: float = 6.0, clip: bool = True) -> np.ndarray:
    """Shades of Gray color constancy.

    Each channel is divided by ``sqrt(3) * e_c`` where ``e`` is the normalized
    illuminant, so an achromatic illuminant gives unit gains.
    """
    img = as_image(img)
    e = _minkowski_means(img, p)
    # 1 / (sqrt(3) * e_hat_c) == rms(e) / e_c; the max-relative rms is exactly
    # e_c when all channels agree, so gray illuminants give gains of exactly 1
    m = e.max()
    rms = m * math.sqrt(float(np.mean((e / m) ** 2)))
    out = img / (e / rms)
    if clip:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and clamped borders.

    Works on (H, W) and (H, W, C) arrays.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    if arr.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass(frozen=True)
class AugmentParams:
    crop_fraction_range: tuple[float, float] = (0.8, 1.0)
    rotation_range_deg: tuple[float, float] = (0.0, 180.0)
    shear_range_deg: tuple[float, float] = (0.0, 30.0)
    allow_hflip: bool = True
    allow_vflip: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_fraction_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_fraction_range must satisfy 0 < lo <= hi <= 1, got {self.crop_fraction_range}")
        lo, hi = self.rotation_range_deg
        if not (0 <= lo <= hi <= 180):
            raise ValueError(f"rotation_range_deg must lie within [0, 180], got {self.rotation_range_deg}")
        lo, hi = self.shear_range_deg
        if not (0 <= lo <= hi <= 30):
            raise ValueError(f"shear_range_deg must lie within [0, 30], got {self.shear_range_deg}")


@dataclass(frozen=True)
class AugmentDraw:
    """One concrete set of augmentation decisions."""

    crop_box: tuple[int, int, int, int]  # top, left, height, width
    angle_deg: float
    hflip: bool
    vflip: bool
    shear_deg: float


def draw_augmentation(shape: tuple[int, int], params: AugmentParams) -> AugmentDraw:
    # draw order is fixed so that a seed always maps to the same decisions
    h, w = shape
    rng = np.random.Generator(np.random.PCG64(params.seed & (2**64 - 1)))
    frac = rng.uniform(*params.crop_fraction_range)
    ch = min(h, max(2, int(round(frac * h))))
    cw = min(w, max(2, int(round(frac * w))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    angle = rng.uniform(*params.rotation_range_deg)
    hflip = bool(rng.random() < 0.5) and params.allow_hflip
    vflip = bool(rng.random() < 0.5) and params.allow_vflip
    shear = rng.uniform(*params.shear_range_deg)
    return AugmentDraw((top, left, ch, cw), float(angle), hflip, vflip, float(shear))


def _warp(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply an output->input 2x2 linear map about the image center, bilinear, edge replicated."""
    h, w = img.shape[:2]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.affine_transform(img[..., c], matrix, offset=offset, order=1, mode="nearest")
    return out


def apply_augmentation(img: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Crop, rotate, flip, shear, then resize back to the input size."""
    img = as_image(img)
    h, w = img.shape[:2]
    top, left, ch, cw = draw.crop_box
    out = img[top : top + ch, left : left + cw]
    if draw.angle_deg:
        t = math.radians(draw.angle_deg)
        # (row, col) coordinates; counter-clockwise rotation of content
        rot = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
        out = _warp(out, rot)
    if draw.hflip:
        out = out[:, ::-1]
    if draw.vflip:
        out = out[::-1, :]
    if draw.shear_deg:
        shear = np.array([[1.0, 0.0], [math.tan(math.radians(draw.shear_deg)), 1.0]])
        out = _warp(out, shear)
    out = resize_bilinear(out, w, h)
    return np.clip(out, 0.0, 1.0)


def augment(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    img = as_image(img)
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError("augment needs an image of at least 2x2 pixels")
    return apply_augmentation(img, draw_augmentation(img.shape[:2], params))

"""Deterministic synthetic dermoscopy-like dataset.

Class identity is a joint function of lesion color and lesion shape (round
vs elongated), so image color alone cannot separate all seven classes. Every
sample gets a ground-truth mask and two noisy probability maps (one PNG, one
float grid) standing in for two external segmentation models.
"""

from __future__ import annotations

import csv
import math
import os
from pathlib import Path

import numpy as np
from scipy import ndimage

from dermhybrid import imageio
from dermhybrid.dataset import ClassLabel

LESION_COLORS = np.array(
    [
        [0.36, 0.22, 0.14],  # dark brown
        [0.62, 0.24, 0.26],  # red
        [0.38, 0.38, 0.52],  # blue-gray
        [0.66, 0.48, 0.32],  # tan
    ]
)
# (color index, elongated) per class ordinal
CLASS_CUES = [(0, False), (0, True), (1, False), (1, True), (2, False), (2, True), (3, False)]


def _smooth_noise(rng, shape, sigma):
    field = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return field / (field.std() + 1e-12)


def render_sample(label: int, size: int, rng: np.random.Generator):
    """Return ``(image, mask)`` for one sample of the given class."""
    color_idx, elongated = CLASS_CUES[label]
    h = w = size
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    area = rng.uniform(0.06, 0.14) * h * w
    aspect = rng.uniform(2.0, 2.6) if elongated else rng.uniform(1.0, 1.15)
    a = math.sqrt(area * aspect / math.pi)
    b = a / aspect
    theta = rng.uniform(0, math.pi)
    margin = a + 3
    cy = rng.uniform(margin, h - margin) if h > 2 * margin else h / 2
    cx = rng.uniform(margin, w - margin) if w > 2 * margin else w / 2
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    ang = np.arctan2(v, u)
    wobble = 1 + 0.06 * np.sin(rng.integers(3, 7) * ang + rng.uniform(0, 2 * math.pi))
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2) / wobble
    mask = r <= 1.0

    skin = np.array([0.86, 0.66, 0.56]) + rng.uniform(-0.05, 0.05, 3)
    lesion = LESION_COLORS[color_idx] + rng.uniform(-0.04, 0.04, 3)
    alpha = np.clip((1.0 - r) / 0.15 + 0.5, 0.0, 1.0)[..., None]
    texture = 0.04 * _smooth_noise(rng, (h, w), 2.0)[..., None]
    img = skin * (1 + 0.03 * _smooth_noise(rng, (h, w), 6.0)[..., None])
    img = img * (1 - alpha) + (lesion + texture) * alpha
    cast = 1 + rng.uniform(-0.12, 0.12, 3)
    img = img * cast + rng.normal(0, 0.015, img.shape)
    return np.clip(img, 0, 1), mask


def noisy_probmap(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    prob = ndimage.gaussian_filter(mask.astype(np.float64), 1.2) * 0.9 + 0.05
    return np.clip(prob + rng.normal(0, 0.08, mask.shape), 0, 1)


def make_synthetic_dataset(root: str | os.PathLike, n_per_class: int = 100, size: int = 64, seed: int = 0,
                           probmaps: bool = True) -> Path:
    """Write images, masks, probability maps and ``labels.csv`` under ``root``.

    Probability maps go to ``root/probmaps_a`` (PNG) and ``root/probmaps_b``
    (float grid). Returns the labels-file path.
    """
    root = Path(root)
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    pa, pb = root / "probmaps_a", root / "probmaps_b"
    if probmaps:
        pa.mkdir(exist_ok=True)
        pb.mkdir(exist_ok=True)
    rows = []
    for label in ClassLabel:
        for k in range(n_per_class):
            sid = f"syn_{label.name.lower()}_{k:04d}"
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, int(label), k])))
            img, mask = render_sample(int(label), size, rng)
            imageio.write_rgb(images / f"{sid}.png", img)
            imageio.write_mask(images / f"{sid}_mask.png", mask)
            if probmaps:
                imageio.write_probmap(pa / f"{sid}.png", noisy_probmap(mask, rng))
                imageio.write_probmap(pb / f"{sid}.f32", noisy_probmap(mask, rng))
            rows.append((sid, label.name))
    labels = root / "labels.csv"
    with open(labels, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"])
        w.writerows(rows)
    return labels

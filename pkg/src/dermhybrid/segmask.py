"""Probability-map ensembling, binarization, mask cleanup and Dice overlap."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
from scipy import ndimage

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class EmptyMaskWarning(UserWarning):
    """Raised (as a warning) when cleanup receives a mask with no lesion pixels."""


def ensemble_average(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted per-pixel mean of probability maps."""
    if len(maps) == 0:
        raise ValueError("ensemble_average needs at least one probability map")
    arrays = [np.asarray(m, dtype=np.float64) for m in maps]
    ref = arrays[0].shape
    for i, a in enumerate(arrays[1:], start=1):
        if a.shape != ref:
            raise ValueError(f"probability map {i} has shape {a.shape}, map 0 has {ref}")
    return np.mean(np.stack(arrays), axis=0)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) >= threshold


def postprocess_mask(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected component and fill its holes.

    An empty mask is replaced by an all-true mask (with an
    :class:`EmptyMaskWarning`) so feature extraction stays defined.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    if n == 0:
        warnings.warn("mask has no foreground pixel; falling back to the full frame", EmptyMaskWarning, stacklevel=2)
        return np.ones_like(mask)
    sizes = np.bincount(labels.ravel())[1:]
    # argmax picks the lowest label on size ties, which is raster-order stable
    keep = labels == (int(np.argmax(sizes)) + 1)
    # holes: background regions not 4-connected to the frame border
    return ndimage.binary_fill_holes(keep, structure=FOUR_CONNECTED)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Sorensen-Dice coefficient; two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mask_from_probmaps(maps: Sequence[np.ndarray], threshold: float = 0.5) -> np.ndarray:
    """Ensemble -> binarize -> cleanup."""
    return postprocess_mask(binarize(ensemble_average(maps), threshold))

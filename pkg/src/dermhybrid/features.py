"""Handcrafted lesion descriptors: 56 mask-shape features plus 48 intensity
features for each of the R, G and B channels (200 in total).

The registry below fixes the order. ``CATALOG_VERSION`` must change whenever
an entry is added, removed, reordered or redefined.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError
from skimage.morphology import convex_hull_image

CATALOG_VERSION = "dh-features-1.0"
N_FEATURES = 200

HU_ORDERS = [(2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)]
N_HARMONICS = 7
N_ANGLE_BINS = 64
ENTROPY_BINS = 32
HIST_BINS = 8
BAND_WIDTH = 5
_EPS = 1e-6
_CROSS = ndimage.generate_binary_structure(2, 1)

GEOMETRIC_NAMES = (
    [
        "area_fraction",
        "perimeter_fraction",
        "compactness",
        "eccentricity",
        "major_axis",
        "minor_axis",
        "orientation_sin2",
        "orientation_cos2",
        "solidity",
        "extent",
        "equiv_diameter_fraction",
        "centroid_offset_x",
        "centroid_offset_y",
        "bbox_aspect_ratio",
    ]
    + [f"hu_{i}" for i in range(1, 8)]
    + [f"eta_{p}{q}" for p, q in HU_ORDERS]
    + ["radial_mean", "radial_std", "radial_min", "radial_max", "radial_max_over_min"]
    + [f"radial_p{q}" for q in (10, 25, 50, 75, 90)]
    + ["radial_cv", "asymmetry_major", "asymmetry_minor", "border_irregularity", "convexity"]
    + [
        "defect_count",
        "defect_area_fraction",
        "defect_max_area_fraction",
        "defect_mean_depth",
        "defect_max_depth",
        "defect_depth_std",
    ]
    + [f"radial_fourier_{k}" for k in range(1, N_HARMONICS + 1)]
)

_REGION_STATS = ["mean", "std", "min", "max", "median", "mad", "skew", "kurtosis", "entropy", "p10", "p25", "p75", "p90"]

INTENSITY_NAMES = (
    [f"in_{s}" for s in _REGION_STATS]
    + [f"out_{s}" for s in _REGION_STATS]
    + ["contrast_mean_diff", "contrast_median_diff", "contrast_mean_ratio", "contrast_std_ratio"]
    + ["band_grad_mean", "band_grad_std", "band_grad_median", "band_grad_p90", "band_grad_max"]
    + ["band_mean", "band_std", "in_grad_mean", "out_grad_mean"]
    + [f"in_hist_{b}" for b in range(HIST_BINS)]
    + ["in_uniformity"]
)

assert len(GEOMETRIC_NAMES) == 56, len(GEOMETRIC_NAMES)
assert len(INTENSITY_NAMES) == 48, len(INTENSITY_NAMES)


class FeatureEntry(NamedTuple):
    index: int
    name: str
    family: str  # "geometric" or "intensity"
    channel: str  # "none", "R", "G" or "B"


def feature_catalog() -> list[FeatureEntry]:
    entries = [FeatureEntry(i, name, "geometric", "none") for i, name in enumerate(GEOMETRIC_NAMES)]
    for ch in "RGB":
        for name in INTENSITY_NAMES:
            entries.append(FeatureEntry(len(entries), f"{ch}_{name}", "intensity", ch))
    return entries


def registry_csv() -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "name", "family", "channel"])
    for e in feature_catalog():
        w.writerow(list(e))
    return buf.getvalue()


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    catalog_version: str = CATALOG_VERSION

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (N_FEATURES,):
            raise ValueError(f"feature vector must have {N_FEATURES} entries, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return N_FEATURES


# -- geometry ---------------------------------------------------------------


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = a[y + dy, x + dx], False outside the frame."""
    out = np.zeros_like(a)
    h, w = a.shape
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[yd, xd] = a[ys, xs]
    return out


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Lesion pixels with at least one 4-neighbour outside the lesion (or the frame)."""
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def perimeter(mask: np.ndarray) -> float:
    """Boundary length: unit links between 4-adjacent boundary pixels plus
    sqrt(2) links between diagonal ones not already joined through a shared
    4-neighbour on the boundary."""
    b = boundary_pixels(np.asarray(mask, dtype=bool))
    straight = np.count_nonzero(b & _shift(b, 0, 1)) + np.count_nonzero(b & _shift(b, 1, 0))
    diag = 0
    for dx in (1, -1):
        pair = b & _shift(b, 1, dx)
        bridged = _shift(b, 0, dx) | _shift(b, 1, 0)
        diag += np.count_nonzero(pair & ~bridged)
    return straight + math.sqrt(2.0) * diag


def _central_moments(ys: np.ndarray, xs: np.ndarray) -> tuple[float, float, dict]:
    cy, cx = ys.mean(), xs.mean()
    dy, dx = ys - cy, xs - cx
    mu = {(p, q): float(np.sum(dx**p * dy**q)) for p in range(4) for q in range(4) if p + q <= 3}
    return cy, cx, mu


def hu_moments(eta: dict) -> list[float]:
    n20, n02, n11 = eta[2, 0], eta[0, 2], eta[1, 1]
    n30, n03, n21, n12 = eta[3, 0], eta[0, 3], eta[2, 1], eta[1, 2]
    a, b = n30 + n12, n21 + n03
    return [
        n20 + n02,
        (n20 - n02) ** 2 + 4 * n11**2,
        (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2,
        a**2 + b**2,
        (n30 - 3 * n12) * a * (a**2 - 3 * b**2) + (3 * n21 - n03) * b * (3 * a**2 - b**2),
        (n20 - n02) * (a**2 - b**2) + 4 * n11 * a * b,
        (3 * n21 - n03) * a * (a**2 - 3 * b**2) - (n30 - 3 * n12) * b * (3 * a**2 - b**2),
    ]


def _pixel_corners(ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    pts = np.concatenate(
        [np.stack([ys + oy, xs + ox], axis=1) for oy in (-0.5, 0.5) for ox in (-0.5, 0.5)]
    )
    return np.unique(pts, axis=0)


def _hull_perimeter(points: np.ndarray) -> float:
    if len(points) < 3:
        return 2.0 * float(np.ptp(points, axis=0).max()) if len(points) > 1 else 0.0
    try:
        return float(ConvexHull(points).area)
    except QhullError:
        # collinear centres: the hull degenerates to a doubled segment
        return 2.0 * float(np.ptp(points, axis=0).max())


def _asymmetry(mask: np.ndarray, ys, xs, cy, cx, axis_angle: float) -> float:
    """Fraction of lesion pixels whose mirror image across the given axis is not lesion."""
    uy, ux = math.sin(axis_angle), math.cos(axis_angle)
    dy, dx = ys - cy, xs - cx
    along = dy * uy + dx * ux
    ry = np.rint(cy + 2 * along * uy - dy).astype(np.intp)
    rx = np.rint(cx + 2 * along * ux - dx).astype(np.intp)
    h, w = mask.shape
    inside = (ry >= 0) & (ry < h) & (rx >= 0) & (rx < w)
    hit = np.zeros(len(ys), dtype=bool)
    hit[inside] = mask[ry[inside], rx[inside]]
    return float(np.count_nonzero(~hit)) / len(ys)


def _radial_profile(by, bx, dist, cy, cx) -> np.ndarray:
    """Largest boundary distance per angular bin, gaps filled circularly."""
    theta = np.arctan2(by - cy, bx - cx)
    bins = np.floor((theta + math.pi) / (2 * math.pi) * N_ANGLE_BINS).astype(np.intp) % N_ANGLE_BINS
    prof = np.full(N_ANGLE_BINS, np.nan)
    for b, d in zip(bins, dist):
        if not d <= prof[b]:
            prof[b] = d
    filled = ~np.isnan(prof)
    if not filled.all():
        idx = np.arange(N_ANGLE_BINS)
        prof = np.interp(idx, idx[filled], prof[filled], period=N_ANGLE_BINS)
    return prof


def geometric_features(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    ys = ys.astype(np.float64)
    xs = xs.astype(np.float64)
    area = float(len(ys))
    diag = math.hypot(h, w)
    r_eq = math.sqrt(area / math.pi)

    perim = perimeter(mask)
    perim_eff = max(perim, 1.0)
    cy, cx, mu = _central_moments(ys, xs)
    cov_xx, cov_yy, cov_xy = mu[2, 0] / area, mu[0, 2] / area, mu[1, 1] / area
    half_tr = (cov_xx + cov_yy) / 2
    root = math.sqrt(max(((cov_xx - cov_yy) / 2) ** 2 + cov_xy**2, 0.0))
    lam1, lam2 = half_tr + root, max(half_tr - root, 0.0)
    ecc = math.sqrt(1.0 - lam2 / lam1) if lam1 > 0 else 0.0
    theta = 0.5 * math.atan2(2 * cov_xy, cov_xx - cov_yy)

    corners = _pixel_corners(ys, xs)
    try:
        hull_area = float(ConvexHull(corners).volume)
    except QhullError:
        hull_area = area
    y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
    bbox_h, bbox_w = y1 - y0 + 1, x1 - x0 + 1

    eta = {k: v / area ** (1 + (k[0] + k[1]) / 2) for k, v in mu.items() if k[0] + k[1] >= 2}

    b = boundary_pixels(mask)
    by, bx = np.nonzero(b)
    by = by.astype(np.float64)
    bx = bx.astype(np.float64)
    dist = np.hypot(by - cy, bx - cx) / r_eq
    rmin, rmax = float(dist.min()), float(dist.max())
    rmean, rstd = float(dist.mean()), float(dist.std())
    prof = _radial_profile(by, bx, dist, cy, cx)
    spectrum = np.abs(np.fft.rfft(prof))
    dc = spectrum[0] if spectrum[0] > 0 else 1.0
    irregularity = float(np.mean(np.abs(prof - 0.5 * (np.roll(prof, 1) + np.roll(prof, -1)))))

    hull_img = convex_hull_image(mask)
    defects = hull_img & ~mask
    lab, n_def = ndimage.label(defects, structure=_CROSS)
    if n_def:
        depth_map = ndimage.distance_transform_edt(np.pad(hull_img, 1))[1:-1, 1:-1]
        idx = np.arange(1, n_def + 1)
        sizes = ndimage.sum_labels(np.ones_like(depth_map), lab, idx) / area
        depths = ndimage.maximum(depth_map, lab, idx) / r_eq
        defect_stats = [n_def, sizes.sum(), sizes.max(), depths.mean(), depths.max(), depths.std()]
    else:
        defect_stats = [0, 0.0, 0.0, 0.0, 0.0, 0.0]

    values = [
        area / (h * w),
        perim / (2.0 * (h + w)),
        4 * math.pi * area / perim_eff**2,
        ecc,
        4 * math.sqrt(lam1) / diag,
        4 * math.sqrt(lam2) / diag,
        math.sin(2 * theta),
        math.cos(2 * theta),
        area / hull_area,
        area / (bbox_h * bbox_w),
        2 * r_eq / diag,
        (cx - (w - 1) / 2) / w,
        (cy - (h - 1) / 2) / h,
        bbox_w / bbox_h,
        *hu_moments(eta),
        *(eta[k] for k in HU_ORDERS),
        rmean,
        rstd,
        rmin,
        rmax,
        rmax / max(rmin, 1e-3),
        *np.percentile(dist, [10, 25, 50, 75, 90]),
        rstd / rmean if rmean > 0 else 0.0,
        _asymmetry(mask, ys, xs, cy, cx, theta),
        _asymmetry(mask, ys, xs, cy, cx, theta + math.pi / 2),
        irregularity,
        _hull_perimeter(np.stack([by, bx], axis=1)) / perim_eff,
        *defect_stats,
        *(spectrum[1 : N_HARMONICS + 1] / dc),
    ]
    return np.asarray(values, dtype=np.float64)


# -- intensity --------------------------------------------------------------


def _region_stats(v: np.ndarray) -> list[float]:
    if v.size == 0:
        return [0.0] * len(_REGION_STATS)
    mean = float(v.mean())
    std = float(v.std()) if v.max() > v.min() else 0.0
    med = float(np.median(v))
    if std > 1e-12:
        z = (v - mean) / std
        skew = float(np.mean(z**3))
        kurt = float(np.mean(z**4)) - 3.0
    else:
        skew = kurt = 0.0
    hist = np.histogram(np.clip(v, 0, 1), bins=ENTROPY_BINS, range=(0.0, 1.0))[0] / v.size
    nz = hist[hist > 0]
    entropy = float(-np.sum(nz * np.log2(nz)))
    p10, p25, p75, p90 = np.percentile(v, [10, 25, 75, 90])
    return [mean, std, float(v.min()), float(v.max()), med, float(np.median(np.abs(v - med))),
            skew, kurt, entropy, p10, p25, p75, p90]


def _masked_stats(v: np.ndarray) -> list[float]:
    if v.size == 0:
        return [0.0] * 5
    return [float(v.mean()), float(v.std()), float(np.median(v)), float(np.percentile(v, 90)), float(v.max())]


def intensity_features(channel: np.ndarray, mask: np.ndarray, band: np.ndarray) -> np.ndarray:
    inside = channel[mask]
    outside = channel[~mask]
    s_in = _region_stats(inside)
    s_out = _region_stats(outside)
    if outside.size:
        contrast = [
            s_in[0] - s_out[0],
            s_in[4] - s_out[4],
            (s_in[0] + _EPS) / (s_out[0] + _EPS),
            (s_in[1] + _EPS) / (s_out[1] + _EPS),
        ]
    else:
        contrast = [0.0, 0.0, 1.0, 1.0]
    gy, gx = np.gradient(channel)
    grad = np.hypot(gy, gx)
    band_vals = channel[band]
    grad_out = grad[~mask]
    hist = np.histogram(np.clip(inside, 0, 1), bins=HIST_BINS, range=(0.0, 1.0))[0] / inside.size
    fine = np.histogram(np.clip(inside, 0, 1), bins=ENTROPY_BINS, range=(0.0, 1.0))[0] / inside.size
    values = (
        s_in
        + s_out
        + contrast
        + _masked_stats(grad[band])
        + [float(band_vals.mean()) if band_vals.size else 0.0, float(band_vals.std()) if band_vals.size else 0.0]
        + [float(grad[mask].mean()), float(grad_out.mean()) if grad_out.size else 0.0]
        + list(hist)
        + [float(np.sum(fine**2))]
    )
    return np.asarray(values, dtype=np.float64)


def border_band(mask: np.ndarray, width: int = BAND_WIDTH) -> np.ndarray:
    """Ring between the ``width``-step dilation and erosion of the mask."""
    outer = ndimage.binary_dilation(mask, structure=_CROSS, iterations=width)
    inner = ndimage.binary_erosion(mask, structure=_CROSS, iterations=width, border_value=0)
    return outer & ~inner


def extract_features(img: np.ndarray, mask: np.ndarray) -> FeatureVector:
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    if img.shape[:2] != mask.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {mask.shape} dimensions differ")
    if not mask.any():
        raise ValueError("mask has no lesion pixel; run postprocess_mask first")
    band = border_band(mask)
    parts = [geometric_features(mask)]
    parts += [intensity_features(img[..., c], mask, band) for c in range(3)]
    values = np.concatenate(parts)
    if not np.all(np.isfinite(values)):
        bad = [feature_catalog()[i].name for i in np.flatnonzero(~np.isfinite(values))]
        raise FloatingPointError(f"non-finite features: {bad}")
    return FeatureVector(values)


# -- standardization --------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    scales: np.ndarray
    catalog_version: str = CATALOG_VERSION

    def __post_init__(self):
        if np.any(np.asarray(self.scales) <= 0):
            raise ValueError("standardizer scales must be strictly positive")

    def transform(self, table: np.ndarray) -> np.ndarray:
        return (np.asarray(table, dtype=np.float64) - self.means) / self.scales

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# catalog_version={self.catalog_version}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["column", "mean", "scale"])
            for i, (m, s) in enumerate(zip(self.means, self.scales)):
                w.writerow([i, repr(float(m)), repr(float(s))])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Standardizer":
        with open(path, encoding="utf-8") as fh:
            first = fh.readline().strip()
            if not first.startswith("# catalog_version="):
                raise ValueError(f"{path}: missing catalog_version comment line")
            rows = list(csv.DictReader(fh))
        means = np.array([float(r["mean"]) for r in rows])
        scales = np.array([float(r["scale"]) for r in rows])
        return cls(means, scales, first.split("=", 1)[1])


def fit_standardizer_array(table: np.ndarray, catalog_version: str = CATALOG_VERSION) -> Standardizer:
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] == 0:
        raise ValueError("cannot fit a standardizer on an empty table")
    means = table.mean(axis=0)
    std = table.std(axis=0)  # population std
    scales = np.where(std < 1e-12, 1.0, std)
    return Standardizer(means, scales, catalog_version)


def fit_standardizer(vectors: Sequence[FeatureVector]) -> Standardizer:
    if len(vectors) == 0:
        raise ValueError("cannot fit a standardizer on an empty table")
    versions = {v.catalog_version for v in vectors}
    if len(versions) != 1:
        raise ValueError(f"mixed catalog versions: {sorted(versions)}")
    return fit_standardizer_array(np.stack([v.values for v in vectors]), versions.pop())


def apply_standardizer(s: Standardizer, v: FeatureVector) -> FeatureVector:
    if s.catalog_version != v.catalog_version:
        raise ValueError(f"catalog version mismatch: standardizer {s.catalog_version}, vector {v.catalog_version}")
    return FeatureVector(s.transform(v.values), v.catalog_version)


# -- feature table persistence ---------------------------------------------


def write_feature_table(path: str | os.PathLike, ids: Sequence[str], table: np.ndarray,
                        catalog_version: str = CATALOG_VERSION) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# catalog_version={catalog_version}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + [f"f{i:03d}" for i in range(N_FEATURES)])
        for sid, row in zip(ids, table):
            w.writerow([sid] + [repr(float(x)) for x in row])


def read_feature_table(path: str | os.PathLike) -> tuple[list[str], np.ndarray, str]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("# catalog_version="):
            raise ValueError(f"{path}: missing catalog_version comment line")
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != N_FEATURES + 1:
            raise ValueError(f"{path}: expected {N_FEATURES + 1} columns, got {len(header)}")
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(x) for x in row[1:]])
    table = np.asarray(rows, dtype=np.float64).reshape(len(ids), N_FEATURES)
    return ids, table, first.split("=", 1)[1]

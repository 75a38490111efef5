"""Sample ingestion and stratified train/val/test splitting."""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ClassLabel(enum.IntEnum):
    AKIEC = 0  # actinic keratosis
    BCC = 1  # basal cell carcinoma
    BKL = 2  # benign keratosis
    DF = 3  # dermatofibroma
    NV = 4  # melanocytic nevus
    MEL = 5  # melanoma
    VASC = 6  # vascular lesion

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        key = text.strip().upper()
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown label {text.strip()}") from None


NUM_CLASSES = len(ClassLabel)


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_path: Path
    label: ClassLabel
    mask_path: Path | None = None
    probmap_paths: tuple[Path, ...] = ()

    def __post_init__(self):
        if not str(self.image_path):
            raise ValueError(f"sample {self.sample_id!r} has an empty image path")


@dataclass
class SplitManifest:
    train: list[SampleRecord]
    val: list[SampleRecord]
    test: list[SampleRecord]
    seed: int
    ratios: tuple[float, float, float]
    # pre-carve train counts per class ordinal (train + val)
    train_pre_carve: dict[int, int] = field(default_factory=dict)

    def split_of(self) -> dict[str, str]:
        out = {}
        for name in ("train", "val", "test"):
            for rec in getattr(self, name):
                out[rec.sample_id] = name
        return out

    def counts(self) -> dict[str, list[int]]:
        """Per-class counts for each split, indexed by class ordinal."""
        result = {}
        for name in ("train", "val", "test"):
            c = [0] * NUM_CLASSES
            for rec in getattr(self, name):
                c[int(rec.label)] += 1
            result[name] = c
        result["train_pre_carve"] = [a + b for a, b in zip(result["train"], result["val"])]
        return result


def load_manifest(
    root: str | os.PathLike,
    labels_file: str | os.PathLike,
    probmap_dirs: Sequence[str | os.PathLike] = (),
) -> list[SampleRecord]:
    """Read a ``sample_id,label`` CSV and resolve image, mask and probability-map paths.

    Images are ``<root>/<sample_id>.png``; masks ``<root>/<sample_id>_mask.png``
    are optional. Each directory in ``probmap_dirs`` contributes
    ``<sample_id>.png`` or ``<sample_id>.f32`` when present.
    """
    root = Path(root)
    records: list[SampleRecord] = []
    seen: set[str] = set()
    with open(labels_file, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["sample_id", "label"]:
            raise ValueError(f"{labels_file}: expected header 'sample_id,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 2:
                raise ValueError(f"{labels_file}:{lineno}: malformed row")
            sid = row[0].strip()
            label = ClassLabel.parse(row[1])
            if sid in seen:
                raise ValueError(f"duplicate sample_id {sid}")
            seen.add(sid)
            image = root / f"{sid}.png"
            if not image.is_file():
                raise FileNotFoundError(f"missing image for sample_id {sid}: {image}")
            mask = root / f"{sid}_mask.png"
            probmaps = []
            for d in probmap_dirs:
                for ext in (".png", ".f32"):
                    p = Path(d) / f"{sid}{ext}"
                    if p.is_file():
                        probmaps.append(p)
                        break
            records.append(
                SampleRecord(
                    sample_id=sid,
                    image_path=image,
                    label=label,
                    mask_path=mask if mask.is_file() else None,
                    probmap_paths=tuple(probmaps),
                )
            )
    return records


def round_half_up(n: int, frac: float) -> int:
    # Decimal(str(.)) keeps 115 * 0.7 at exactly 80.5
    return int((Decimal(n) * Decimal(str(frac))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def class_rng(seed: int, ordinal: int) -> np.random.Generator:
    """PCG64 generator for one class, keyed by (seed, class ordinal) through SeedSequence."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), ordinal])))


def stratified_split(
    records: Sequence[SampleRecord],
    ratios: tuple[float, float, float] = (0.7, 0.3, 0.1),
    seed: int = 0,
) -> SplitManifest:
    """Per-class split: round-half-up train share, remainder to test, then a
    round-half-up validation carve from each class's train share.

    ``ratios`` is ``(train_frac, test_frac, val_frac_of_train)``; pass 0 for
    the last entry to skip the validation carve.
    """
    if not records:
        raise ValueError("cannot split an empty record list")
    train_frac, test_frac, val_frac = ratios
    if not (0 < train_frac < 1 and 0 < test_frac < 1):
        raise ValueError(f"train/test fractions must lie in (0,1), got {ratios}")
    if abs(train_frac + test_frac - 1.0) > 1e-12:
        raise ValueError(f"train_frac + test_frac must equal 1, got {train_frac + test_frac}")
    if not 0 <= val_frac < 1:
        raise ValueError(f"val_frac_of_train must lie in [0,1), got {val_frac}")
    ids = [r.sample_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample_id in records")

    by_class: dict[int, list[SampleRecord]] = {}
    for rec in records:
        by_class.setdefault(int(rec.label), []).append(rec)

    train, val, test = [], [], []
    pre = {}
    for ordinal in sorted(by_class):
        members = by_class[ordinal]
        n = len(members)
        if n < 3:
            raise ValueError(f"class {ClassLabel(ordinal).name} has {n} samples; at least 3 required")
        n_train = round_half_up(n, train_frac)
        n_val = round_half_up(n_train, val_frac) if val_frac > 0 else 0
        order = class_rng(seed, ordinal).permutation(n)
        shuffled = [members[i] for i in order]
        val.extend(shuffled[:n_val])
        train.extend(shuffled[n_val:n_train])
        test.extend(shuffled[n_train:])
        pre[ordinal] = n_train
    return SplitManifest(train=train, val=val, test=test, seed=seed, ratios=tuple(ratios), train_pre_carve=pre)


def write_manifest(manifest: SplitManifest, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "split"])
        for name in ("train", "val", "test"):
            for rec in getattr(manifest, name):
                w.writerow([rec.sample_id, rec.label.name, name])


def write_split_counts(manifest: SplitManifest, path: str | os.PathLike) -> None:
    """Sidecar with per-class pre- and post-carve counts."""
    counts = manifest.counts()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "train_pre_carve", "train", "val", "test"])
        for c in ClassLabel:
            w.writerow([c.name] + [counts[k][c] for k in ("train_pre_carve", "train", "val", "test")])


def read_manifest(path: str | os.PathLike, records: Iterable[SampleRecord]) -> SplitManifest:
    """Rebuild a manifest from its CSV, resolving rows against loaded records."""
    by_id = {r.sample_id: r for r in records}
    lists: dict[str, list[SampleRecord]] = {"train": [], "val": [], "test": []}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            sid = row["sample_id"]
            if sid not in by_id:
                raise ValueError(f"manifest row {sid} not present in the labels file")
            if row["split"] not in lists:
                raise ValueError(f"manifest row {sid}: bad split {row['split']!r}")
            lists[row["split"]].append(by_id[sid])
    return SplitManifest(train=lists["train"], val=lists["val"], test=lists["test"], seed=-1, ratios=(0.0, 0.0, 0.0))

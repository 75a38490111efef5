"""Matplotlib figures written next to the evaluation CSVs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_confusion(ax, cm: np.ndarray, class_names: Sequence[str], title: str = "") -> None:
    counts = np.asarray(cm)
    rows = counts.sum(axis=1, keepdims=True)
    frac = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for (i, j), n in np.ndenumerate(counts):
        if n:
            ax.text(j, i, str(n), ha="center", va="center", fontsize=7,
                    color="white" if frac[i, j] > 0.5 else "black")
    if title:
        ax.set_title(title)


def _read_history(path: Path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in ("epoch", "train_loss", "val_loss", "val_bacc")}


def plot_history(ax, histories: dict[str, dict]) -> None:
    for tag, h in histories.items():
        line, = ax.plot(h["epoch"], h["train_loss"], label=f"{tag} train")
        if np.any(np.isfinite(h["val_loss"])):
            ax.plot(h["epoch"], h["val_loss"], ls="--", color=line.get_color(), label=f"{tag} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.legend(frameon=False, fontsize=8)


def render_eval_figures(out_dir: Path, split: str, cms: dict[str, np.ndarray], class_names: Sequence[str],
                        history_paths: Sequence[Path] = ()) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    fig, axes = plt.subplots(1, len(cms), figsize=(4.2 * len(cms), 4.0), squeeze=False)
    for ax, (tag, cm) in zip(axes[0], cms.items()):
        plot_confusion(ax, cm, class_names, tag)
    fig.tight_layout()
    path = out_dir / f"confusion_{split}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    hist = {Path(p).stem.replace("history_", "model_"): _read_history(p) for p in history_paths if Path(p).is_file()}
    if hist:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        plot_history(ax, hist)
        fig.tight_layout()
        path = out_dir / "training_curves.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written

"""One-vs-rest linear SVM over concatenated hybrid-model embeddings."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dermhybrid.dataset import NUM_CLASSES


@dataclass
class SvmModel:
    weights: np.ndarray  # (K, D)
    biases: np.ndarray  # (K,)
    reg_c: float
    objective_history: list[list[float]] | None = None

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None] if single else x
        if x2.shape[1] != self.dim:
            raise ValueError(f"input has dimension {x2.shape[1]}, model expects {self.dim}")
        s = x2 @ self.weights.T + self.biases
        return s[0] if single else s

    def save(self, path: str | os.PathLike) -> None:
        k, d = self.weights.shape
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{k},{d},{self.reg_c!r}\n")
            for w, b in zip(self.weights, self.biases):
                fh.write(",".join(repr(float(v)) for v in (*w, b)) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SvmModel":
        with open(path, encoding="utf-8") as fh:
            k, d, c = fh.readline().strip().split(",")
            rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
        arr = np.asarray(rows, dtype=np.float64)
        if arr.shape != (int(k), int(d) + 1):
            raise ValueError(f"{path}: expected {k} rows of {int(d) + 1} values, got {arr.shape}")
        return cls(arr[:, :-1].copy(), arr[:, -1].copy(), float(c))


def hinge_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, lam: float) -> float:
    """``lam/2 ||w||^2 + mean(max(0, 1 - y (x.w + b)))`` with y in {-1, +1}."""
    margins = 1.0 - y * (x @ w + b)
    return 0.5 * lam * float(w @ w) + float(np.mean(np.maximum(margins, 0.0)))


def _fit_binary(x, y, lam, rng, epochs, batch_size, lr0, tol):
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    best = (hinge_objective(w, b, x, y, lam), w.copy(), b)
    history = [best[0]]
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            xb, yb = x[idx], y[idx]
            active = yb * (xb @ w + b) < 1.0
            gw = lam * w - (yb[active, None] * xb[active]).sum(axis=0) / len(idx)
            gb = -yb[active].sum() / len(idx)
            step += 1
            eta = lr0 / np.sqrt(step)
            w = w - eta * gw
            b = b - eta * gb
        obj = hinge_objective(w, b, x, y, lam)
        # keep the best iterate so the reported objective never increases
        if obj < best[0]:
            improvement = best[0] - obj
            best = (obj, w.copy(), b)
            history.append(obj)
            if improvement < tol * max(1.0, abs(obj)):
                break
        else:
            history.append(best[0])
            if len(history) > 20 and history[-20] - best[0] < tol * max(1.0, abs(best[0])):
                break
    return best[1], best[2], history


def svm_fit(
    embeddings: np.ndarray,
    labels: Sequence[int],
    reg_c: float = 1.0,
    seed: int = 0,
    epochs: int = 300,
    batch_size: int = 16,
    lr0: float = 0.5,
    tol: float = 1e-6,
) -> SvmModel:
    """Fit K one-vs-rest L2-regularized hinge-loss machines by sub-gradient descent.

    Per class the objective is ``1/2 ||w||^2 + C sum(hinge)``, optimized in
    the equivalent per-sample form with ``lam = 1 / (C n)``. The bias is not
    regularized. Classes absent from ``labels`` still get a row (trained on
    all-negative targets).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise ValueError("embeddings and labels must have equal lengths")
    if x.shape[1] == 0:
        raise ValueError("embeddings have zero width")
    if len(np.unique(labels)) < 2:
        raise ValueError("svm_fit needs at least two distinct labels")
    if reg_c <= 0:
        raise ValueError("reg_c must be positive")
    n, d = x.shape
    lam = 1.0 / (reg_c * n)
    weights = np.zeros((NUM_CLASSES, d))
    biases = np.zeros(NUM_CLASSES)
    histories = []
    for c in range(NUM_CLASSES):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), c])))
        y = np.where(labels == c, 1.0, -1.0)
        weights[c], biases[c], hist = _fit_binary(x, y, lam, rng, epochs, batch_size, lr0, tol)
        histories.append(hist)
    return SvmModel(weights, biases, float(reg_c), histories)


def svm_predict(m: SvmModel, x: np.ndarray) -> tuple[int, np.ndarray]:
    """Label and decision scores; ties go to the lowest class ordinal."""
    scores = m.decision_function(x)
    return int(np.argmax(scores)), scores


def svm_predict_batch(m: SvmModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = m.decision_function(x)
    return np.argmax(scores, axis=1), scores

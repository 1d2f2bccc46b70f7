"""MAPE metric and seeded k-fold cross-validation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ._parallel import ordered_map
from ._rng import stream
from .data import FeatureTable
from .errors import DataError
from .models import ModelSpec, train


def mape(y_true, y_pred) -> float:
    """Mean absolute percentage error, in percent. Zero ground truth is rejected."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise DataError(f"mape needs equal non-empty lengths, got {y_true.size} and {y_pred.size}")
    if np.any(y_true == 0):
        raise DataError("mape is undefined for zero ground-truth values")
    return float(100.0 * np.mean(np.abs(y_true - y_pred) / np.abs(y_true)))


def kfold_split(n: int, k: int, seed: int) -> np.ndarray:
    """Per-sample fold index: a seeded shuffle dealt into k contiguous folds.

    The first ``n % k`` folds hold one extra sample.
    """
    if not 2 <= k <= n:
        raise DataError(f"k must satisfy 2 <= k <= n (n={n}), got {k}")
    order = stream(seed, "kfold", n, k).permutation(n)
    sizes = np.full(k, n // k)
    sizes[: n % k] += 1
    assignment = np.empty(n, dtype=np.int64)
    start = 0
    for fold, size in enumerate(sizes):
        assignment[order[start:start + size]] = fold
        start += size
    return assignment


@dataclass(frozen=True)
class CVReport:
    fold_scores: List[float]
    mean_mape: float
    fold_assignments: List[int]
    seed: int

    @property
    def k(self) -> int:
        return len(self.fold_scores)

    def to_dict(self) -> dict:
        return {
            "fold_scores": list(self.fold_scores),
            "mean_mape": self.mean_mape,
            "fold_assignments": list(self.fold_assignments),
            "seed": self.seed,
            "k": self.k,
        }

    @classmethod
    def from_dict(cls, obj) -> "CVReport":
        return cls(list(obj["fold_scores"]), obj["mean_mape"], list(obj["fold_assignments"]), obj["seed"])

    def table(self) -> str:
        """Fixed-width per-fold score table."""
        lines = [f"{'fold':>4}  {'n_test':>6}  {'MAPE %':>10}"]
        counts = np.bincount(np.asarray(self.fold_assignments), minlength=self.k)
        for i, score in enumerate(self.fold_scores):
            lines.append(f"{i:>4}  {counts[i]:>6}  {score:>10.4f}")
        lines.append(f"{'mean':>4}  {len(self.fold_assignments):>6}  {self.mean_mape:>10.4f}")
        return "\n".join(lines)


def cross_validate(spec: ModelSpec, table: FeatureTable, target: str, k: int = 5, seed: int = 0) -> CVReport:
    """Train on k-1 folds, score MAPE on the held-out fold, for every fold."""
    y = table.target(target)
    folds = kfold_split(table.n_samples, k, seed)

    def run(fold):
        test = folds == fold
        model = train(spec, table.take(np.flatnonzero(~test)), target)
        return mape(y[test], model.predict(table.rows[test]))

    scores = ordered_map(run, range(k))
    return CVReport([float(s) for s in scores], float(np.mean(scores)), [int(f) for f in folds], seed)

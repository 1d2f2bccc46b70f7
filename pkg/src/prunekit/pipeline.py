"""Rank-and-retrain methodology: explain a model, keep the top p% of features, refit.

Also hosts the partial-data (interval) experiment and the synthetic benchmark
generators that stand in for proprietary process data.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ._rng import stream
from .data import FeatureTable, TimeSeriesRecord, extract_features, truncate_records
from .errors import DataError
from .evaluation import CVReport, cross_validate
from .explain import (
    METHODS,
    ImportanceReport,
    permutation_importance,
    select_k_best_scores,
    shapley_global,
    shapley_sampled,
)
from .models import ModelSpec, train

DEFAULT_GRID = tuple(range(10, 101, 10))
HOLDOUT_FRACTION = 0.2
MAX_BACKGROUND = 128


def n_selected(p: float, n_features: int) -> int:
    """Round-half-up of p% of the feature count, never below one."""
    return max(1, min(n_features, math.floor(p * n_features / 100.0 + 0.5)))


def holdout_split(n: int, seed: int, fraction: float = HOLDOUT_FRACTION):
    """Seeded (train, test) index arrays, both sorted."""
    if n < 2:
        raise DataError(f"a holdout split needs at least 2 samples, got {n}")
    order = stream(seed, "holdout", n).permutation(n)
    n_test = min(n - 1, max(1, round(fraction * n)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def rank_features(spec: ModelSpec, table: FeatureTable, target: str, method: str, seed: int = 0,
                  repeats: int = 10, n_permutations: int = 100) -> ImportanceReport:
    """Rank features by one attribution method.

    Model-based methods train on a seeded 80% split and attribute on the
    remaining 20%; the univariate baseline scores the full table.
    """
    if method not in METHODS:
        raise DataError(f"unknown attribution method {method!r}; valid methods: {list(METHODS)}")
    table.target(target)
    if method == "select_k_best":
        return select_k_best_scores(table, target)
    train_idx, test_idx = holdout_split(table.n_samples, seed)
    model = train(spec, table.take(train_idx), target)
    split_meta = {"holdout_fraction": HOLDOUT_FRACTION, "train_size": int(train_idx.size),
                  "test_size": int(test_idx.size), "model_kind": spec.kind}
    if method == "permutation":
        report = permutation_importance(model, table.take(test_idx), target, repeats=repeats, seed=seed)
    else:
        background = train_idx
        if background.size > MAX_BACKGROUND:
            background = np.sort(stream(seed, "background").choice(background, MAX_BACKGROUND, replace=False))
        expl = shapley_sampled(model, table, test_idx, background, n_permutations=n_permutations, seed=seed)
        report = shapley_global(expl)
    return ImportanceReport(report.method, report.scores, report.rank, {**report.metadata, **split_meta})


@dataclass(frozen=True)
class SweepPoint:
    p: float
    selected_features: List[str]
    cv: CVReport

    def to_dict(self) -> dict:
        return {"p": self.p, "n_features": len(self.selected_features),
                "selected_features": list(self.selected_features), "cv": self.cv.to_dict()}


@dataclass(frozen=True)
class SweepResult:
    method: str
    grid: List[float]
    points: List[SweepPoint]
    best_p: float
    best_features: List[str]
    baseline_cv: CVReport
    ranking: Optional[ImportanceReport] = None
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def best_point(self) -> SweepPoint:
        return self.points[self.grid.index(self.best_p)]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "grid": list(self.grid),
            "points": [pt.to_dict() for pt in self.points],
            "best_p": self.best_p,
            "best_features": list(self.best_features),
            "best_mean_mape": self.best_point.cv.mean_mape,
            "baseline_mean_mape": self.baseline_cv.mean_mape,
            "ranking": self.ranking.to_dict() if self.ranking else None,
            "metadata": dict(sorted(self.metadata.items())),
        }

    def to_csv(self) -> str:
        k = self.baseline_cv.k
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["p", "n_features", "mean_mape"] + [f"fold_{i}" for i in range(k)])
        for pt in self.points:
            writer.writerow([repr(pt.p), len(pt.selected_features), repr(pt.cv.mean_mape)]
                            + [repr(s) for s in pt.cv.fold_scores])
        return buf.getvalue()


def _check_grid(grid: Sequence[float]) -> List[float]:
    grid = [float(p) if not float(p).is_integer() else int(p) for p in grid]
    if not grid:
        raise DataError("the p-grid is empty")
    for p in grid:
        if not 0 < p <= 100:
            raise DataError(f"grid values must lie in (0, 100], got {p}")
    if len(set(grid)) != len(grid):
        raise DataError("grid values must be distinct")
    if 100 not in grid:
        raise DataError("grid must contain 100 (the all-features baseline)")
    return grid


def feature_sweep(spec: ModelSpec, table: FeatureTable, target: str, method: str,
                  grid: Sequence[float] = DEFAULT_GRID, k: int = 5, seed: int = 0,
                  ranking: Optional[ImportanceReport] = None, **rank_options) -> SweepResult:
    """Cross-validate a fresh model on the top-p% ranked features for every p in ``grid``.

    The ranking is computed once on the full feature set. Every point shares
    the same fold assignment.
    """
    grid = _check_grid(grid)
    if ranking is None:
        ranking = rank_features(spec, table, target, method, seed=seed, **rank_options)
    elif ranking.method != method:
        raise DataError(f"supplied ranking was produced by {ranking.method!r}, not {method!r}")
    points = []
    for p in grid:
        selected = ranking.top(n_selected(p, table.n_features))
        points.append(SweepPoint(p, selected, cross_validate(spec, table.project(selected), target, k, seed)))
    best = min(points, key=lambda pt: (pt.cv.mean_mape, len(pt.selected_features), pt.p))
    baseline = points[grid.index(100)].cv
    meta = {
        "rounding": "max(1, round_half_up(p/100 * n_features))",
        "shared_folds": True,
        "k": k,
        "seed": seed,
        "n_features": table.n_features,
        "model": spec.to_dict(),
        "tie_break": "lowest mean_mape, then fewer features, then smaller p",
    }
    return SweepResult(method, grid, points, best.p, list(best.selected_features), baseline, ranking, meta)


@dataclass(frozen=True)
class IntervalResult:
    fractions: List[float]
    reports: List[CVReport]
    metadata: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fractions": list(self.fractions),
            "reports": [r.to_dict() for r in self.reports],
            "mean_mape": [r.mean_mape for r in self.reports],
            "metadata": dict(sorted(self.metadata.items())),
        }

    def to_csv(self) -> str:
        k = self.reports[0].k if self.reports else 0
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fraction", "mean_mape"] + [f"fold_{i}" for i in range(k)])
        for frac, rep in zip(self.fractions, self.reports):
            writer.writerow([repr(frac), repr(rep.mean_mape)] + [repr(s) for s in rep.fold_scores])
        return buf.getvalue()


def interval_experiment(spec: ModelSpec, records: Sequence[TimeSeriesRecord], target: str,
                        fractions: Sequence[float], k: int = 5, seed: int = 0,
                        include_dc: bool = True) -> IntervalResult:
    """Cross-validated error when only the first fraction of each series is observed.

    Targets stay the final quality values regardless of the fraction.
    """
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise DataError("no fractions given")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise DataError(f"fractions must lie in (0, 1], got {f}")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise DataError("fractions must be strictly increasing")
    reports = []
    for f in fractions:
        table = extract_features(truncate_records(records, f), include_dc=include_dc)
        reports.append(cross_validate(spec, table, target, k, seed))
    meta = {"k": k, "seed": seed, "include_dc": include_dc, "n_records": len(records), "model": spec.to_dict()}
    return IntervalResult(fractions, reports, meta)


# --------------------------------------------------------------------------
# synthetic benchmarks

@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 100
    relevant: Sequence[float] = (4.0, 3.0, 2.0)
    n_irrelevant: int = 7
    noise_sigma: float = 0.5
    seed: int = 0
    target: str = "y"

    def __post_init__(self):
        if self.n_samples < 1:
            raise DataError("n_samples must be >= 1")
        if not any(c != 0 for c in self.relevant):
            raise DataError("at least one relevant coefficient must be nonzero")
        if self.n_irrelevant < 0 or self.noise_sigma < 0:
            raise DataError("n_irrelevant and noise_sigma must be non-negative")

    @property
    def relevant_names(self) -> List[str]:
        return [f"rel_{i}" for i in range(len(self.relevant))]


def generate_synthetic(spec: SyntheticSpec) -> FeatureTable:
    """Linear target over uniform(1, 2) features, plus Gaussian noise, shifted by +10."""
    rng = stream(spec.seed, "synthetic")
    n_rel = len(spec.relevant)
    X = rng.uniform(1.0, 2.0, size=(spec.n_samples, n_rel + spec.n_irrelevant))
    y = X[:, :n_rel] @ np.asarray(spec.relevant, dtype=float)
    if spec.noise_sigma > 0:
        y = y + rng.normal(0.0, spec.noise_sigma, size=spec.n_samples)
    y = y + 10.0
    names = spec.relevant_names + [f"noise_{i}" for i in range(spec.n_irrelevant)]
    return FeatureTable(names, X, {spec.target: y})


@dataclass(frozen=True)
class SyntheticSeriesSpec:
    """Records whose quality-relevant signal lives only in the first part of each series."""

    n_records: int = 30
    min_length: int = 200
    max_length: int = 400
    informative_fraction: float = 0.1
    noise_sigma: float = 0.05
    seed: int = 0
    target: str = "Ra"

    def __post_init__(self):
        if self.n_records < 1 or not 1 <= self.min_length <= self.max_length:
            raise DataError("invalid synthetic series dimensions")
        if not 0 < self.informative_fraction <= 1:
            raise DataError("informative_fraction must lie in (0, 1]")


def generate_synthetic_series(spec: SyntheticSeriesSpec) -> List[TimeSeriesRecord]:
    """Two force channels ("fa", "fz") plus cutting configuration; target driven by the series prefix."""
    records = []
    for r in range(spec.n_records):
        rng = stream(spec.seed, "synthetic_series", r)
        amp_a, amp_z = rng.uniform(1.0, 2.0, size=2)
        depth, speed, feed = rng.uniform(0.5, 1.5), rng.uniform(100.0, 200.0), rng.uniform(0.05, 0.15)
        channels = {}
        for name, amp in (("fa", amp_a), ("fz", amp_z)):
            length = int(rng.integers(spec.min_length, spec.max_length + 1))
            head = math.ceil(spec.informative_fraction * length)
            t = np.arange(length)
            signal = rng.normal(0.0, 0.1, size=length)
            signal[:head] += 5.0 * amp * np.sin(2 * np.pi * t[:head] / 8.0)
            channels[name] = signal
        quality = 2.0 * amp_a + amp_z + 0.5 * depth + 10.0
        if spec.noise_sigma > 0:
            quality += rng.normal(0.0, spec.noise_sigma)
        records.append(TimeSeriesRecord(
            f"rec_{r:04d}", channels,
            {"depth_of_cut": depth, "cutting_speed": speed, "feed_rate": feed},
            {spec.target: float(quality)},
        ))
    return records

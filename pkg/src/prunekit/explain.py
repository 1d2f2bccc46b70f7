"""Feature attribution: permutation importance, Shapley values, univariate F-scores.

Every method produces an :class:`ImportanceReport` whose ``rank`` field is the
contract consumed downstream; raw scores are only comparable within a method.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ._rng import stream
from .data import FeatureTable
from .errors import DataError, ModelError
from .evaluation import mape
from .models import Model, fit

METHODS = ("permutation", "shapley", "select_k_best")
STRATEGIES = ("marginalize", "retrain")
EXACT_MAX_FEATURES = 20
RETRAIN_MAX_FEATURES = 10
# cap on rows handed to a single predict call
_BATCH_ROWS = 200_000


def rank_by_score(scores: Dict[str, float]) -> List[str]:
    """Descending score; ties broken by feature name."""
    return sorted(scores, key=lambda name: (-scores[name], name))


@dataclass(frozen=True)
class ImportanceReport:
    method: str
    scores: Dict[str, float]
    rank: List[str] = field(default=None)
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise DataError(f"unknown attribution method {self.method!r}; valid methods: {list(METHODS)}")
        scores = {name: float(v) for name, v in self.scores.items()}
        object.__setattr__(self, "scores", scores)
        expected = rank_by_score(scores)
        if self.rank is None:
            object.__setattr__(self, "rank", expected)
        elif list(self.rank) != expected:
            raise DataError("rank is inconsistent with scores")

    def top(self, count: int) -> List[str]:
        return self.rank[:count]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "rank": list(self.rank),
            "scores": {name: _json_float(self.scores[name]) for name in self.rank},
            "metadata": dict(sorted(self.metadata.items())),
        }

    @classmethod
    def from_dict(cls, obj) -> "ImportanceReport":
        scores = {k: float(v) for k, v in obj["scores"].items()}
        return cls(obj["method"], scores, list(obj["rank"]), dict(obj.get("metadata", {})))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["feature", "score"])
        for name in self.rank:
            writer.writerow([name, repr(self.scores[name])])
        return buf.getvalue()


def _json_float(value: float):
    # strict JSON has no infinities; the perfect-correlation sentinel becomes a string
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _check_features(model: Model, table: FeatureTable) -> None:
    if list(model.feature_names) != list(table.feature_names):
        raise ModelError(
            f"model was trained on features {model.feature_names}, table has {table.feature_names}"
        )


# --------------------------------------------------------------------------
# permutation importance

def permutation_importance(model: Model, table: FeatureTable, target: str, repeats: int = 10,
                           seed: int = 0) -> ImportanceReport:
    """Mean increase in MAPE when one column is shuffled; positive means important."""
    _check_features(model, table)
    if repeats < 1:
        raise DataError(f"repeats must be >= 1, got {repeats}")
    X = table.rows
    y = table.target(target)
    n, d = X.shape
    base = mape(y, model.predict(X))
    scores = {}
    per_batch = max(1, _BATCH_ROWS // max(1, n * repeats))
    for start in range(0, d, per_batch):
        cols = range(start, min(d, start + per_batch))
        blocks = []
        for i in cols:
            for r in range(repeats):
                shuffled = X.copy()
                shuffled[:, i] = X[stream(seed, "permutation", i, r).permutation(n), i]
                blocks.append(shuffled)
        preds = model.predict(np.concatenate(blocks)).reshape(len(cols), repeats, n)
        for j, i in enumerate(cols):
            deltas = [mape(y, preds[j, r]) - base for r in range(repeats)]
            scores[table.feature_names[i]] = float(np.mean(deltas))
    meta = {
        "repeats": repeats,
        "seed": seed,
        "metric": "mape",
        "baseline_mape": base,
        "sample_count": n,
        "sign_convention": "score = MAPE(permuted) - MAPE(original); larger is more important",
    }
    return ImportanceReport("permutation", scores, metadata=meta)


# --------------------------------------------------------------------------
# Shapley values

@dataclass(frozen=True)
class ShapleyExplanation:
    phi: np.ndarray
    baseline: float
    strategy: str
    feature_names: List[str]
    explained_rows: List[int]
    estimator: str
    metadata: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "phi": self.phi.tolist(),
            "baseline": self.baseline,
            "strategy": self.strategy,
            "feature_names": list(self.feature_names),
            "explained_rows": list(self.explained_rows),
            "estimator": self.estimator,
            "metadata": dict(sorted(self.metadata.items())),
        }


class _MarginalValue:
    """v(S) = mean over background rows b of f(x with features outside S taken from b)."""

    def __init__(self, model: Model, background: np.ndarray):
        self.model = model
        self.background = background

    def __call__(self, x: np.ndarray, masks: np.ndarray) -> np.ndarray:
        nb, d = self.background.shape
        out = np.empty(masks.shape[0])
        step = max(1, _BATCH_ROWS // nb)
        for start in range(0, masks.shape[0], step):
            chunk = masks[start:start + step]
            z = np.where(chunk[:, None, :], x[None, None, :], self.background[None, :, :])
            out[start:start + step] = self.model.predict(z.reshape(-1, d)).reshape(chunk.shape[0], nb).mean(axis=1)
        return out


class _RetrainValue:
    """v(S) = prediction at x of the model spec refit on the background rows restricted to S."""

    def __init__(self, model: Model, rows: np.ndarray, y: np.ndarray):
        self.model = model
        self.rows = rows
        self.y = y
        self._cache = {}

    def _fitted(self, mask: np.ndarray) -> Model:
        key = mask.tobytes()
        if key not in self._cache:
            cols = np.flatnonzero(mask)
            names = [self.model.feature_names[i] for i in cols]
            self._cache[key] = fit(self.model.spec, self.rows[:, cols], self.y, names, self.model.target)
        return self._cache[key]

    def __call__(self, x: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return np.array([self._fitted(m).predict(x[np.flatnonzero(m)][None, :])[0] for m in masks])


def _value_function(model, table, background, strategy):
    if strategy not in STRATEGIES:
        raise DataError(f"unknown Shapley strategy {strategy!r}; expected one of {list(STRATEGIES)}")
    bg = np.asarray(background, dtype=int)
    if bg.size == 0:
        raise DataError("Shapley values need a non-empty background set")
    if strategy == "marginalize":
        return _MarginalValue(model, table.rows[bg])
    if table.n_features > RETRAIN_MAX_FEATURES:
        raise DataError(f"retrain strategy is limited to {RETRAIN_MAX_FEATURES} features")
    return _RetrainValue(model, table.rows[bg], table.target(model.target)[bg])


def _all_masks(n: int) -> np.ndarray:
    codes = np.arange(1 << n)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def shapley_exact(model: Model, table: FeatureTable, explain_rows: Sequence[int], background: Sequence[int],
                  strategy: str = "marginalize") -> ShapleyExplanation:
    """Shapley values by enumerating all 2^n coalitions."""
    _check_features(model, table)
    n = table.n_features
    if n > EXACT_MAX_FEATURES:
        raise DataError(f"exact Shapley enumeration is limited to {EXACT_MAX_FEATURES} features, got {n}")
    value = _value_function(model, table, background, strategy)
    rows = [int(r) for r in explain_rows]
    masks = _all_masks(n)
    codes = np.arange(1 << n)
    sizes = masks.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])
    phi = np.zeros((len(rows), n))
    baseline = None
    for j, r in enumerate(rows):
        v = value(table.rows[r], masks)
        baseline = float(v[0])
        for i in range(n):
            without = codes[(codes >> i) & 1 == 0]
            phi[j, i] = float(np.sum(weight[sizes[without]] * (v[without | (1 << i)] - v[without])))
    if baseline is None:
        baseline = float(value(table.rows[0], masks[:1])[0])
    meta = {"coalitions": 1 << n, "background_size": len(background), "sample_count": len(rows)}
    return ShapleyExplanation(phi, baseline, strategy, list(table.feature_names), rows, "exact", meta)


def shapley_sampled(model: Model, table: FeatureTable, explain_rows: Sequence[int], background: Sequence[int],
                    n_permutations: int = 100, seed: int = 0, strategy: str = "marginalize",
                    batch_permutations: int = 256) -> ShapleyExplanation:
    """Permutation-sampling Shapley estimate (average marginal contribution over random orderings)."""
    _check_features(model, table)
    if n_permutations < 1:
        raise DataError(f"n_permutations must be >= 1, got {n_permutations}")
    n = table.n_features
    value = _value_function(model, table, background, strategy)
    rows = [int(r) for r in explain_rows]
    orders = np.array([stream(seed, "shapley", p).permutation(n) for p in range(n_permutations)], dtype=int)
    empty_full = np.array([np.zeros(n, bool), np.ones(n, bool)])
    phi = np.zeros((len(rows), n))
    baseline = float(value(table.rows[rows[0] if rows else 0], empty_full[:1])[0])
    for j, r in enumerate(rows):
        x = table.rows[r]
        v_empty, v_full = value(x, empty_full)
        total = np.zeros(n)
        for start in range(0, n_permutations, batch_permutations):
            batch = orders[start:start + batch_permutations]
            b = batch.shape[0]
            # prefix masks of lengths 1..n-1 for every ordering in the batch
            position = np.empty_like(batch)
            position[np.arange(b)[:, None], batch] = np.arange(n)
            prefix = position[:, None, :] < np.arange(1, n)[None, :, None]
            inner = value(x, prefix.reshape(-1, n)).reshape(b, n - 1) if n > 1 else np.empty((b, 0))
            chain = np.concatenate([np.full((b, 1), v_empty), inner, np.full((b, 1), v_full)], axis=1)
            contrib = np.diff(chain, axis=1)
            np.add.at(total, batch.ravel(), contrib.ravel())
        phi[j] = total / n_permutations
    meta = {"n_permutations": n_permutations, "seed": seed, "background_size": len(background),
            "sample_count": len(rows)}
    return ShapleyExplanation(phi, baseline, strategy, list(table.feature_names), rows, "sampled", meta)


def shapley_global(expl: ShapleyExplanation, feature_names: Optional[Sequence[str]] = None) -> ImportanceReport:
    """Global importance as the mean absolute Shapley value per feature."""
    names = list(feature_names) if feature_names is not None else list(expl.feature_names)
    if expl.phi.shape[0] == 0:
        raise DataError("cannot aggregate an empty Shapley explanation")
    if expl.phi.shape[1] != len(names):
        raise DataError(f"explanation has {expl.phi.shape[1]} features, {len(names)} names given")
    means = np.mean(np.abs(expl.phi), axis=0)
    meta = {"aggregation": "mean_abs_phi", "value_function": expl.strategy, "estimator": expl.estimator,
            **expl.metadata}
    return ImportanceReport("shapley", dict(zip(names, means.tolist())), metadata=meta)


# --------------------------------------------------------------------------
# univariate baseline

def select_k_best_scores(table: FeatureTable, target: str) -> ImportanceReport:
    """Univariate regression F-statistic of each feature against the target.

    F = r^2 / (1 - r^2) * (n - 2) with r the Pearson correlation; |r| = 1 maps
    to +inf and constant features score 0.
    """
    n = table.n_samples
    if n < 3:
        raise DataError(f"F-statistic needs at least 3 samples, got {n}")
    y = table.target(target)
    yc = y - y.mean()
    syy = float(yc @ yc)
    if syy == 0.0:
        raise DataError(f"target {target!r} is constant; correlation undefined")
    scores = {}
    constant = []
    for i, name in enumerate(table.feature_names):
        x = table.rows[:, i]
        if np.all(x == x[0]):
            scores[name] = 0.0
            constant.append(name)
            continue
        xc = x - x.mean()
        r = float(xc @ yc) / math.sqrt(float(xc @ xc) * syy)
        if abs(r) >= 1.0 - 1e-12:
            scores[name] = math.inf
        else:
            scores[name] = r * r / (1.0 - r * r) * (n - 2)
    if constant:
        warnings.warn(f"zero-variance features scored 0: {constant}", RuntimeWarning, stacklevel=2)
    meta = {"statistic": "f_regression", "sample_count": n, "zero_variance_features": constant}
    return ImportanceReport("select_k_best", scores, metadata=meta)


def report_to_json(report: ImportanceReport, **extra) -> str:
    return json.dumps({**report.to_dict(), **extra}, indent=2, sort_keys=True, allow_nan=False) + "\n"

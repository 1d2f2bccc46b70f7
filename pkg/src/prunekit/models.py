"""From-scratch tree regressors: CART tree, random forest, gradient boosting.

All three share the node representation below and predict through a flattened
array form so whole ensembles are evaluated in a handful of numpy operations.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import __version__
from ._parallel import ordered_map
from ._rng import stream
from .data import FeatureTable
from .errors import ModelError

MODEL_FORMAT = "prunekit.model"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Leaf:
    value: float


@dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Split, Leaf]


@dataclass(frozen=True)
class TreeParams:
    max_depth: Optional[int] = None
    min_samples_leaf: int = 1
    min_samples_split: int = 2

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 0:
            raise ModelError(f"max_depth must be >= 0 or None, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ModelError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if self.min_samples_split < 2:
            raise ModelError(f"min_samples_split must be >= 2, got {self.min_samples_split}")


@dataclass(frozen=True)
class ForestModel:
    trees: List[TreeNode]
    params: TreeParams
    seed: int
    features_per_split: Optional[int] = None
    bootstrap: bool = True

    def __post_init__(self):
        if len(self.trees) < 1:
            raise ModelError("a forest needs at least one tree")


@dataclass(frozen=True)
class GbmModel:
    f0: float
    stages: List[TreeNode]
    learning_rate: float
    params: TreeParams
    train_mse: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ModelError(f"learning rate must be positive, got {self.learning_rate}")


# --------------------------------------------------------------------------
# fitting

def _node_mean(y: np.ndarray) -> float:
    # exact for constant nodes, where summation rounding would otherwise leak in
    if np.all(y == y[0]):
        return float(y[0])
    return float(np.mean(y))


def _best_split(xn: np.ndarray, centered: np.ndarray, min_leaf: int, parent_sse: float):
    """Best (column, threshold) for one node, or None.

    Maximizes the SSE reduction; near-equal gains (relative 1e-12) are ties,
    resolved by lowest column then lowest threshold.
    """
    m, k = xn.shape
    if k == 0:
        return None
    order = np.argsort(xn, axis=0, kind="stable")
    xs = np.take_along_axis(xn, order, axis=0)
    ys = centered[order]
    lo, hi = min_leaf - 1, m - min_leaf  # split after sorted position j, j in [lo, hi)
    if hi <= lo:
        return None
    csum = np.cumsum(ys, axis=0)[lo:hi]
    n_left = np.arange(lo + 1, hi + 1, dtype=float)[:, None]
    n_right = m - n_left
    total = float(centered.sum())
    gain = csum * csum / n_left + (total - csum) ** 2 / n_right - total * total / m
    gain[~(xs[lo + 1:hi + 1] > xs[lo:hi])] = -np.inf
    best = gain.max()
    tol = 1e-12 * parent_sse
    if not np.isfinite(best) or best <= tol:
        return None
    tied = (gain >= best - tol).T  # column-major scan: lowest column, then lowest threshold
    col, pos = divmod(int(np.argmax(tied.ravel())), gain.shape[0])
    below, above = xs[lo + pos, col], xs[lo + pos + 1, col]
    threshold = (below + above) / 2.0
    if not below <= threshold < above:
        threshold = below
    return col, float(threshold)


def fit_tree(rows, y, params: TreeParams = TreeParams(), rng: Optional[np.random.Generator] = None,
             max_features: Optional[int] = None) -> TreeNode:
    """Greedy CART regression tree minimizing the children's summed squared error.

    With ``max_features`` set, each split only considers that many randomly
    chosen features (drawn from ``rng``).
    """
    X = np.asarray(rows, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ModelError("rows must be a 2-d matrix")
    if X.shape[0] < 1:
        raise ModelError("cannot fit a tree on zero samples")
    if y.shape != (X.shape[0],):
        raise ModelError(f"target length {y.size} does not match {X.shape[0]} rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ModelError("rows and target must be finite")
    n_features = X.shape[1]
    subsample = max_features is not None and max_features < n_features
    if subsample and rng is None:
        raise ModelError("feature subsampling needs an rng stream")
    all_features = np.arange(n_features)

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        ys = y[idx]
        value = _node_mean(ys)
        m = idx.size
        if (m < params.min_samples_split or m < 2 * params.min_samples_leaf
                or (params.max_depth is not None and depth >= params.max_depth)):
            return Leaf(value)
        centered = ys - value
        parent_sse = float(centered @ centered)
        if parent_sse <= 0.0:
            return Leaf(value)
        if subsample:
            features = np.sort(rng.choice(n_features, size=max_features, replace=False))
        else:
            features = all_features
        found = _best_split(X[np.ix_(idx, features)], centered, params.min_samples_leaf, parent_sse)
        if found is None:
            return Leaf(value)
        col, threshold = found
        feature = int(features[col])
        goes_left = X[idx, feature] <= threshold
        return Split(feature, threshold, grow(idx[goes_left], depth + 1), grow(idx[~goes_left], depth + 1))

    return grow(np.arange(X.shape[0]), 0)


def _fit_forest_tree(X, y, params, seed, index, features_per_split, bootstrap):
    rng = stream(seed, "forest", index)
    if bootstrap:
        sample = rng.integers(0, X.shape[0], size=X.shape[0])
        X, y = X[sample], y[sample]
    return fit_tree(X, y, params, rng=rng, max_features=features_per_split)


def fit_forest(rows, y, n_trees: int = 200, params: TreeParams = TreeParams(), seed: int = 0,
               features_per_split: Optional[int] = None, bootstrap: bool = True) -> ForestModel:
    """Bagged trees; tree ``t`` draws its bootstrap and feature subsets from stream (seed, t)."""
    if n_trees < 1:
        raise ModelError(f"n_trees must be >= 1, got {n_trees}")
    X = np.asarray(rows, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ModelError("rows must be a non-empty 2-d matrix")
    if features_per_split is not None and not 1 <= features_per_split:
        raise ModelError(f"features_per_split must be >= 1, got {features_per_split}")
    trees = ordered_map(
        lambda t: _fit_forest_tree(X, y, params, seed, t, features_per_split, bootstrap), range(n_trees)
    )
    return ForestModel(trees, params, seed, features_per_split, bootstrap)


def fit_gbm(rows, y, n_stages: int = 200, learning_rate: float = 0.05,
            params: TreeParams = TreeParams(max_depth=3)) -> GbmModel:
    """Squared-error gradient boosting: each stage fits a tree to the current residuals."""
    if n_stages < 0:
        raise ModelError(f"n_stages must be >= 0, got {n_stages}")
    if not 0.0 < learning_rate <= 1.0:
        raise ModelError(f"learning rate must lie in (0, 1], got {learning_rate}")
    X = np.asarray(rows, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or y.shape != (X.shape[0],):
        raise ModelError("rows must be a non-empty 2-d matrix matching the target length")
    f0 = _node_mean(y)
    current = np.full(y.shape, f0)
    mse = [float(np.mean((y - current) ** 2))]
    stages = []
    for _ in range(n_stages):
        tree = fit_tree(X, y - current, params)
        stages.append(tree)
        current = current + learning_rate * _FlatForest([tree]).leaf_values(X)[:, 0]
        mse.append(float(np.mean((y - current) ** 2)))
    return GbmModel(f0, stages, learning_rate, params, mse)


# --------------------------------------------------------------------------
# prediction

def predict_tree(tree: TreeNode, x) -> float:
    """Route ``x`` down the tree: left iff x[feature] <= threshold."""
    x = np.asarray(x, dtype=float)
    node = tree
    while isinstance(node, Split):
        if node.feature_index >= x.size:
            raise ModelError(f"feature index {node.feature_index} out of bounds for vector of length {x.size}")
        node = node.left if x[node.feature_index] <= node.threshold else node.right
    return node.value


def predict_forest(model: ForestModel, x) -> float:
    return float(np.mean([predict_tree(t, x) for t in model.trees]))


def predict_gbm(model: GbmModel, x) -> float:
    return model.f0 + model.learning_rate * sum(predict_tree(t, x) for t in model.stages)


def flatten_tree(tree: TreeNode) -> Dict[str, list]:
    """Pre-order node arrays with explicit child indices (-1 marks a leaf)."""
    out = {"feature": [], "threshold": [], "left": [], "right": [], "value": []}

    def visit(node):
        i = len(out["feature"])
        for key in out:
            out[key].append(None)
        if isinstance(node, Leaf):
            out["feature"][i], out["threshold"][i] = -1, 0.0
            out["left"][i] = out["right"][i] = -1
            out["value"][i] = float(node.value)
        else:
            out["feature"][i], out["threshold"][i] = int(node.feature_index), float(node.threshold)
            out["value"][i] = 0.0
            out["left"][i] = visit(node.left)
            out["right"][i] = visit(node.right)
        return i

    visit(tree)
    return out


def unflatten_tree(arrays: Dict[str, list]) -> TreeNode:
    feature, threshold = arrays["feature"], arrays["threshold"]
    left, right, value = arrays["left"], arrays["right"], arrays["value"]

    def build(i):
        if feature[i] < 0:
            return Leaf(float(value[i]))
        return Split(int(feature[i]), float(threshold[i]), build(left[i]), build(right[i]))

    return build(0)


def tree_depth(tree: TreeNode) -> int:
    if isinstance(tree, Leaf):
        return 0
    return 1 + max(tree_depth(tree.left), tree_depth(tree.right))


def split_features(tree: TreeNode) -> set:
    """Indices of every feature some split node of ``tree`` reads."""
    if isinstance(tree, Leaf):
        return set()
    return {tree.feature_index} | split_features(tree.left) | split_features(tree.right)


class _FlatForest:
    """Several trees packed into shared node arrays, traversed in lockstep."""

    def __init__(self, trees: Sequence[TreeNode]):
        feats, thrs, lefts, rights, vals, roots = [], [], [], [], [], []
        offset = 0
        self.depth = 0
        self.max_feature = -1
        for tree in trees:
            flat = flatten_tree(tree)
            n = len(flat["feature"])
            roots.append(offset)
            feats += flat["feature"]
            thrs += flat["threshold"]
            lefts += [c + offset if c >= 0 else -1 for c in flat["left"]]
            rights += [c + offset if c >= 0 else -1 for c in flat["right"]]
            vals += flat["value"]
            offset += n
            self.depth = max(self.depth, tree_depth(tree))
            self.max_feature = max(self.max_feature, max(flat["feature"]))
        self.feature = np.array(feats, dtype=np.int64)
        self.threshold = np.array(thrs, dtype=float)
        self.left = np.array(lefts, dtype=np.int64)
        self.right = np.array(rights, dtype=np.int64)
        self.value = np.array(vals, dtype=float)
        self.roots = np.array(roots, dtype=np.int64)

    def leaf_values(self, X: np.ndarray) -> np.ndarray:
        """(n_rows, n_trees) matrix of each tree's prediction."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ModelError("prediction input must be a 2-d matrix")
        if self.max_feature >= X.shape[1]:
            raise ModelError(f"feature index {self.max_feature} out of bounds for {X.shape[1]} columns")
        nodes = np.broadcast_to(self.roots, (X.shape[0], self.roots.size)).copy()
        row = np.arange(X.shape[0])[:, None]
        for _ in range(self.depth):
            feat = self.feature[nodes]
            is_split = feat >= 0
            xv = X[row, np.where(is_split, feat, 0)]
            nxt = np.where(xv <= self.threshold[nodes], self.left[nodes], self.right[nodes])
            nodes = np.where(is_split, nxt, nodes)
        return self.value[nodes]


# --------------------------------------------------------------------------
# uniform model contract

KINDS = ("decision_tree", "random_forest", "gradient_boosting")

DEFAULT_PARAMS = {
    "decision_tree": {"max_depth": 8, "min_samples_leaf": 2, "min_samples_split": 2},
    "random_forest": {"n_trees": 200, "features_per_split": "third", "bootstrap": True,
                      "max_depth": 8, "min_samples_leaf": 2, "min_samples_split": 2},
    "gradient_boosting": {"n_stages": 200, "learning_rate": 0.05, "max_depth": 3,
                          "min_samples_leaf": 1, "min_samples_split": 2},
}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    params: Dict[str, object] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}; expected one of {list(KINDS)}")
        unknown = set(self.params).difference(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ModelError(f"unknown {self.kind} hyperparameters: {sorted(unknown)}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ModelError(f"seed must be a non-negative integer, got {self.seed!r}")

    def resolved(self) -> Dict[str, object]:
        return {**DEFAULT_PARAMS[self.kind], **self.params}

    def tree_params(self) -> TreeParams:
        p = self.resolved()
        return TreeParams(p["max_depth"], int(p["min_samples_leaf"]), int(p["min_samples_split"]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(sorted(self.params.items())), "seed": self.seed}

    @classmethod
    def from_dict(cls, obj) -> "ModelSpec":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ModelError("model spec must be an object with a 'kind' field")
        return cls(obj["kind"], dict(obj.get("params", {})), int(obj.get("seed", 0)))


def _features_per_split(setting, n_features: int) -> Optional[int]:
    if setting in (None, "all"):
        return None
    if setting == "third":
        return max(1, math.ceil(n_features / 3))
    if isinstance(setting, int) and setting >= 1:
        return min(setting, n_features) if n_features else None
    raise ModelError(f"features_per_split must be 'all', 'third' or a positive int, got {setting!r}")


@dataclass(frozen=True)
class Model:
    """A fitted regressor bound to the feature names and target it was trained on."""

    spec: ModelSpec
    feature_names: List[str]
    target: str
    estimator: Union[Leaf, Split, ForestModel, GbmModel]

    def __post_init__(self):
        object.__setattr__(self, "_flat", _FlatForest(self.trees))

    @property
    def trees(self) -> List[TreeNode]:
        est = self.estimator
        if isinstance(est, ForestModel):
            return est.trees
        if isinstance(est, GbmModel):
            return est.stages
        return [est]

    def used_features(self) -> set:
        used = set()
        for tree in self.trees:
            used |= split_features(tree)
        return {self.feature_names[i] for i in used}

    def predict(self, rows) -> np.ndarray:
        X = np.asarray(rows, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.feature_names):
            raise ModelError(f"model expects {len(self.feature_names)} features, got {X.shape[1]}")
        est = self.estimator
        if isinstance(est, GbmModel):
            if not est.stages:
                return np.full(X.shape[0], est.f0)
            return est.f0 + est.learning_rate * self._flat.leaf_values(X).sum(axis=1)
        values = self._flat.leaf_values(X)
        if isinstance(est, ForestModel):
            return values.mean(axis=1)
        return values[:, 0]

    def to_dict(self) -> dict:
        est = self.estimator
        doc = {
            "format": MODEL_FORMAT,
            "format_version": MODEL_FORMAT_VERSION,
            "tool_version": __version__,
            "spec": self.spec.to_dict(),
            "resolved_params": self.spec.resolved(),
            "feature_names": list(self.feature_names),
            "target": self.target,
        }
        if isinstance(est, GbmModel):
            doc.update(f0=est.f0, learning_rate=est.learning_rate, train_mse=list(est.train_mse))
        elif isinstance(est, ForestModel):
            doc.update(features_per_split=est.features_per_split, bootstrap=est.bootstrap)
        doc["trees"] = [flatten_tree(t) for t in self.trees]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Model":
        if doc.get("format") != MODEL_FORMAT:
            raise ModelError("not a prunekit model document")
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ModelError(f"unsupported model format version {doc.get('format_version')!r}")
        spec = ModelSpec.from_dict(doc["spec"])
        trees = [unflatten_tree(t) for t in doc["trees"]]
        params = spec.tree_params()
        if spec.kind == "decision_tree":
            est = trees[0]
        elif spec.kind == "random_forest":
            est = ForestModel(trees, params, spec.seed, doc.get("features_per_split"), doc.get("bootstrap", True))
        else:
            est = GbmModel(float(doc["f0"]), trees, float(doc["learning_rate"]), params, list(doc.get("train_mse", [])))
        return cls(spec, list(doc["feature_names"]), doc["target"], est)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Model":
        return cls.from_dict(json.loads(text))


def fit(spec: ModelSpec, rows, y, feature_names: Sequence[str], target: str) -> Model:
    p = spec.resolved()
    params = spec.tree_params()
    if spec.kind == "decision_tree":
        est = fit_tree(rows, y, params)
    elif spec.kind == "random_forest":
        est = fit_forest(rows, y, int(p["n_trees"]), params, spec.seed,
                         _features_per_split(p["features_per_split"], len(feature_names)), bool(p["bootstrap"]))
    else:
        est = fit_gbm(rows, y, int(p["n_stages"]), float(p["learning_rate"]), params)
    return Model(spec, list(feature_names), target, est)


def train(spec: ModelSpec, table: FeatureTable, target: str) -> Model:
    """Fit ``spec`` on every row of ``table`` against the named target column."""
    if target not in table.targets:
        raise ModelError(f"unknown target {target!r}; available: {sorted(table.targets)}")
    return fit(spec, table.rows, table.targets[target], table.feature_names, target)

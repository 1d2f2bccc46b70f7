import json
import math
import warnings

import numpy as np
import pytest
from scipy import stats

from conftest import additive_model, tree_model
from oracles import random_tree, shapley_by_definition, swap_features
from prunekit._rng import stream
from prunekit.data import FeatureTable
from prunekit.errors import DataError, ModelError
from prunekit.explain import (
    ImportanceReport,
    ShapleyExplanation,
    permutation_importance,
    rank_by_score,
    report_to_json,
    select_k_best_scores,
    shapley_exact,
    shapley_global,
    shapley_sampled,
)
from prunekit.models import Leaf, ModelSpec, Split, predict_tree, train

HAND = FeatureTable(["a", "b"], [[0, 5], [0, 6], [1, 7], [1, 8]], {"y": [10.0, 10.0, 20.0, 20.0]})
HAND_MODEL = tree_model(Split(0, 0.5, Leaf(10.0), Leaf(20.0)), ["a", "b"])


def hand_delta(perm):
    # rows 0,1 (y=10) landing on a=1 cost 100% each; rows 2,3 (y=20) landing on a=0 cost 50% each.
    a = np.array([0, 0, 1, 1])[perm]
    wrong_low = int(np.sum(a[:2] == 1))
    wrong_high = int(np.sum(a[2:] == 0))
    assert wrong_low == wrong_high
    return (100.0 * wrong_low + 50.0 * wrong_high) / 4


def test_permutation_importance_hand_fixture():
    seed, repeats = 3, 6
    report = permutation_importance(HAND_MODEL, HAND, "y", repeats=repeats, seed=seed)
    expected = np.mean([hand_delta(stream(seed, "permutation", 0, r).permutation(4)) for r in range(repeats)])
    assert expected > 0
    assert report.scores["a"] == pytest.approx(expected, abs=1e-12)
    assert report.scores["b"] == 0.0
    assert report.rank == ["a", "b"]
    assert report.metadata["baseline_mape"] == 0.0


def test_permutation_importance_deterministic(small_table):
    model = train(ModelSpec("gradient_boosting", {"n_stages": 20}), small_table, "y")
    a = permutation_importance(model, small_table, "y", repeats=2, seed=5)
    assert a == permutation_importance(model, small_table, "y", repeats=2, seed=5)


@pytest.mark.parametrize("kind", ["decision_tree", "random_forest", "gradient_boosting"])
def test_permutation_importance_unused_features_exactly_zero(kind, small_table):
    params = {
        "decision_tree": {"max_depth": 2},
        "random_forest": {"n_trees": 10, "max_depth": 1, "features_per_split": "all"},
        "gradient_boosting": {"n_stages": 5, "max_depth": 1},
    }[kind]
    # a constant column can never be split on
    table = FeatureTable(small_table.feature_names + ["const"],
                         np.column_stack([small_table.rows, np.full(small_table.n_samples, 1.5)]),
                         small_table.targets)
    model = train(ModelSpec(kind, params, seed=4), table, "y")
    report = permutation_importance(model, table, "y", repeats=3, seed=0)
    unused = set(table.feature_names) - model.used_features()
    assert "const" in unused and len(unused) >= 2
    for name in unused:
        assert report.scores[name] == 0.0


def test_permutation_importance_errors(small_table):
    with pytest.raises(ModelError, match="trained on"):
        permutation_importance(HAND_MODEL, small_table, "y")
    with pytest.raises(DataError):
        permutation_importance(HAND_MODEL, HAND, "y", repeats=0)


def marginal_value(model, x, background):
    """v(S) computed row by row through the reference tree predictor."""
    def v(coalition):
        total = 0.0
        for b in background:
            z = np.array([x[i] if i in coalition else b[i] for i in range(x.size)])
            total += model.predict(z)[0]
        return total / len(background)
    return v


def test_shapley_constant_model():
    rng = np.random.default_rng(0)
    table = FeatureTable(["a", "b", "c"], rng.normal(size=(6, 3)), {"y": np.ones(6)})
    model = tree_model(Leaf(2.5), table.feature_names)
    expl = shapley_exact(model, table, [0, 1], [2, 3, 4, 5])
    assert np.all(expl.phi == 0.0) and expl.baseline == 2.5
    sampled = shapley_sampled(model, table, [0, 1], [2, 3, 4, 5], n_permutations=20, seed=1)
    assert np.all(sampled.phi == 0.0)


def test_shapley_additive_closed_form():
    rng = np.random.default_rng(1)
    X = rng.uniform(1, 2, size=(12, 2))
    table = FeatureTable(["x1", "x2"], X, {"y": np.ones(12)})
    g1 = Split(0, 1.5, Leaf(1.0), Leaf(4.0))
    g2 = Split(1, 1.5, Leaf(-2.0), Leaf(3.0))
    model = additive_model([g1, g2], table.feature_names)
    background = list(range(4, 12))
    expl = shapley_exact(model, table, [0, 1, 2, 3], background)
    for j, r in enumerate(range(4)):
        expect1 = predict_tree(g1, X[r]) - np.mean([predict_tree(g1, X[b]) for b in background])
        expect2 = predict_tree(g2, X[r]) - np.mean([predict_tree(g2, X[b]) for b in background])
        assert expl.phi[j] == pytest.approx([expect1, expect2], abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_shapley_exact_matches_definition(seed):
    rng = np.random.default_rng(seed)
    n = 3 + seed % 2
    X = rng.uniform(0, 1, size=(9, n))
    table = FeatureTable([f"f{i}" for i in range(n)], X, {"y": np.ones(9)})
    model = tree_model(random_tree(rng, list(range(n)), 4), table.feature_names)
    background = [3, 4, 5, 6, 7, 8]
    expl = shapley_exact(model, table, [0, 1, 2], background)
    for j in range(3):
        v = marginal_value(model, X[j], X[background])
        np.testing.assert_allclose(expl.phi[j], shapley_by_definition(v, n), atol=1e-12)
        assert expl.phi[j].sum() == pytest.approx(model.predict(X[j])[0] - expl.baseline, abs=1e-9)


def test_shapley_symmetry():
    rng = np.random.default_rng(8)
    base = random_tree(rng, [0, 1, 2], 3)
    model = additive_model([base, swap_features(base, 0, 1)], ["a", "b", "c"])
    X = rng.uniform(0, 1, size=(10, 3))
    X[0, 1] = X[0, 0]
    swapped = X[1:, [1, 0, 2]]
    table = FeatureTable(["a", "b", "c"], np.vstack([X, swapped]), {"y": np.ones(19)})
    expl = shapley_exact(model, table, [0], list(range(1, 19)))
    assert expl.phi[0, 0] == pytest.approx(expl.phi[0, 1], abs=1e-9)


def test_shapley_sampled_close_to_exact():
    rng = np.random.default_rng(11)
    X = rng.uniform(0, 1, size=(40, 6))
    y = X @ np.array([3.0, -2.0, 1.0, 0.5, 0.0, 0.0]) + X[:, 0] * X[:, 1]
    table = FeatureTable([f"f{i}" for i in range(6)], X, {"y": y})
    model = train(ModelSpec("decision_tree", {"max_depth": 5, "min_samples_leaf": 1}), table, "y")
    rows, background = [0, 1, 2], list(range(10, 40))
    exact = shapley_exact(model, table, rows, background)
    sampled = shapley_sampled(model, table, rows, background, n_permutations=5000, seed=3)
    assert np.max(np.abs(sampled.phi - exact.phi)) <= 0.05 * np.max(np.abs(exact.phi))
    again = shapley_sampled(model, table, rows, background, n_permutations=5000, seed=3)
    np.testing.assert_array_equal(sampled.phi, again.phi)


def test_shapley_dummy_feature_exactly_zero():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(15, 4))
    table = FeatureTable(list("abcd"), X, {"y": np.ones(15)})
    model = tree_model(random_tree(rng, [0, 2], 4, -1, 1), table.feature_names)
    exact = shapley_exact(model, table, [0, 1, 2], list(range(3, 15)))
    sampled = shapley_sampled(model, table, [0, 1, 2], list(range(3, 15)), n_permutations=50, seed=0)
    for expl in (exact, sampled):
        assert np.all(expl.phi[:, 1] == 0.0) and np.all(expl.phi[:, 3] == 0.0)


def test_shapley_retrain_strategy_matches_definition():
    rng = np.random.default_rng(4)
    X = rng.uniform(1, 2, size=(20, 3))
    y = 2 * X[:, 0] + X[:, 1]
    table = FeatureTable(["a", "b", "c"], X, {"y": y})
    spec = ModelSpec("decision_tree", {"max_depth": 2})
    model = train(spec, table, "y")
    background = list(range(5, 20))
    expl = shapley_exact(model, table, [0, 1], background, strategy="retrain")

    def v_for(x):
        def v(coalition):
            cols = sorted(coalition)
            sub = FeatureTable([table.feature_names[c] for c in cols], X[background][:, cols], {"y": y[background]})
            return train(spec, sub, "y").predict(x[cols][None, :])[0]
        return v

    for j in range(2):
        np.testing.assert_allclose(expl.phi[j], shapley_by_definition(v_for(X[j]), 3), atol=1e-12)
    assert expl.baseline == pytest.approx(np.mean(y[background]))


def test_shapley_guards():
    table = FeatureTable([f"f{i}" for i in range(21)], np.zeros((2, 21)), {"y": np.ones(2)})
    model = tree_model(Leaf(1.0), table.feature_names)
    with pytest.raises(DataError, match="limited"):
        shapley_exact(model, table, [0], [1])
    small = FeatureTable(["a"], [[1.0], [2.0]], {"y": [1.0, 1.0]})
    with pytest.raises(DataError, match="background"):
        shapley_exact(tree_model(Leaf(1.0), ["a"]), small, [0], [])
    with pytest.raises(DataError, match="n_permutations"):
        shapley_sampled(tree_model(Leaf(1.0), ["a"]), small, [0], [1], n_permutations=0)
    with pytest.raises(DataError, match="strategy"):
        shapley_exact(tree_model(Leaf(1.0), ["a"]), small, [0], [1], strategy="conditional")


def _expl(phi, names):
    phi = np.asarray(phi, dtype=float)
    return ShapleyExplanation(phi, 0.0, "marginalize", names, list(range(len(phi))), "exact")


def test_shapley_global():
    single = shapley_global(_expl([[-2.0, 1.0]], ["f1", "f2"]))
    assert single.scores == {"f1": 2.0, "f2": 1.0} and single.rank == ["f1", "f2"]
    two = shapley_global(_expl([[1.0, 0.0], [-1.0, 0.0]], ["f1", "f2"]))
    assert two.scores == {"f1": 1.0, "f2": 0.0}
    zero = shapley_global(_expl([[0.0, 0.0, 0.0]], ["c", "a", "b"]))
    assert zero.rank == ["a", "b", "c"]
    with pytest.raises(DataError):
        shapley_global(_expl(np.zeros((0, 2)), ["a", "b"]))


def test_select_k_best_perfect_correlations():
    rng = np.random.default_rng(0)
    y = rng.normal(size=30) + 5
    table = FeatureTable(["noise", "copy"], np.column_stack([rng.normal(size=30), y]), {"y": y})
    report = select_k_best_scores(table, "y")
    assert report.rank[0] == "copy" and math.isinf(report.scores["copy"])
    anti = select_k_best_scores(FeatureTable(["x"], [[1.0], [2.0], [3.0]], {"y": [6.0, 4.0, 2.0]}), "y")
    assert anti.scores["x"] == math.inf


def test_select_k_best_matches_f_statistic():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 3))
    y = X[:, 0] + rng.normal(size=40)
    report = select_k_best_scores(FeatureTable(["a", "b", "c"], X, {"y": y}), "y")
    for i, name in enumerate("abc"):
        slope = stats.linregress(X[:, i], y)
        f = slope.rvalue ** 2 / (1 - slope.rvalue ** 2) * 38
        assert report.scores[name] == pytest.approx(f, rel=1e-9)


def test_select_k_best_independent_noise_rarely_significant():
    critical = stats.f.ppf(0.95, 1, 98)
    below = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        table = FeatureTable(["x"], rng.normal(size=(100, 1)), {"y": rng.normal(size=100)})
        below += select_k_best_scores(table, "y").scores["x"] < critical
    assert below >= 90


def test_select_k_best_zero_variance_and_errors():
    table = FeatureTable(["flat", "x"], [[1.0, 1.0], [1.0, 2.0], [1.0, 4.0]], {"y": [1.0, 2.0, 3.5]})
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        report = select_k_best_scores(table, "y")
    assert report.scores["flat"] == 0.0
    with pytest.raises(DataError, match="at least 3"):
        select_k_best_scores(FeatureTable(["x"], [[1.0], [2.0]], {"y": [1.0, 2.0]}), "y")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(DataError, match="constant"):
            select_k_best_scores(FeatureTable(["x"], [[1.0], [2.0], [3.0]], {"y": [1.0] * 3}), "y")


def test_importance_report_rank_and_serialization():
    report = ImportanceReport("select_k_best", {"b": 1.0, "a": 1.0, "c": math.inf, "d": -0.5})
    assert report.rank == ["c", "a", "b", "d"]
    doc = json.loads(report_to_json(report))
    assert doc["scores"]["c"] == "inf"
    assert ImportanceReport.from_dict(doc) == report
    assert report.to_csv().splitlines() == ["feature,score", "c,inf", "a,1.0", "b,1.0", "d,-0.5"]
    with pytest.raises(DataError, match="inconsistent"):
        ImportanceReport("permutation", {"a": 1.0, "b": 2.0}, ["a", "b"])
    with pytest.raises(DataError, match="valid methods"):
        ImportanceReport("lime", {})


def test_rank_stable_under_positive_affine_maps():
    rng = np.random.default_rng(3)
    scores = dict(zip("abcdefg", rng.integers(0, 4, size=7).astype(float)))
    ranked = rank_by_score(scores)
    assert rank_by_score({k: 3.0 * v + 7.0 for k, v in scores.items()}) == ranked

import numpy as np
import pytest

from prunekit.data import extract_features
from prunekit.errors import DataError
from prunekit.evaluation import cross_validate
from prunekit.models import ModelSpec, train
from prunekit.pipeline import (
    SyntheticSeriesSpec,
    SyntheticSpec,
    feature_sweep,
    generate_synthetic,
    generate_synthetic_series,
    holdout_split,
    interval_experiment,
    n_selected,
    rank_features,
)

FAST_GBM = ModelSpec("gradient_boosting", {"n_stages": 40, "learning_rate": 0.2})
TREE = ModelSpec("decision_tree")


def test_generate_synthetic_noiseless():
    table = generate_synthetic(SyntheticSpec(20, (2.0,), 0, 0.0, seed=1))
    assert table.feature_names == ["rel_0"]
    np.testing.assert_array_equal(table.targets["y"], 2.0 * table.column("rel_0") + 10.0)
    assert np.all((table.rows >= 1.0) & (table.rows < 2.0))


def test_generate_synthetic_shape_and_determinism():
    spec = SyntheticSpec(30, (1.0, 2.0, 3.0), 7, 0.5, seed=4)
    table = generate_synthetic(spec)
    assert table.n_features == 10
    assert table.feature_names[3:] == [f"noise_{i}" for i in range(7)]
    again = generate_synthetic(spec)
    np.testing.assert_array_equal(table.rows, again.rows)
    np.testing.assert_array_equal(table.targets["y"], again.targets["y"])


def test_synthetic_spec_validation():
    with pytest.raises(DataError):
        SyntheticSpec(relevant=(0.0,))
    with pytest.raises(DataError):
        SyntheticSpec(noise_sigma=-1.0)


@pytest.mark.parametrize("p, n, expected", [(20, 30, 6), (10, 10, 1), (25, 10, 3), (1, 10, 1), (100, 7, 7), (15, 10, 2)])
def test_n_selected(p, n, expected):
    assert n_selected(p, n) == expected


def test_holdout_split():
    train_idx, test_idx = holdout_split(100, 3)
    assert test_idx.size == 20 and train_idx.size == 80
    assert sorted(np.concatenate([train_idx, test_idx]).tolist()) == list(range(100))


def test_rank_select_k_best_finds_copy():
    table = generate_synthetic(SyntheticSpec(40, (2.0,), 4, 0.0, seed=0))
    report = rank_features(TREE, table, "y", "select_k_best")
    assert report.rank[0] == "rel_0"


def test_rank_noiseless_select_k_best_relevant_first():
    table = generate_synthetic(SyntheticSpec(200, (3.0, 2.0, 1.5), 7, 0.0, seed=2))
    rank = rank_features(TREE, table, "y", "select_k_best").rank
    assert set(rank[:3]) == {"rel_0", "rel_1", "rel_2"}


def test_rank_permutation_dummy_features_zero():
    table = generate_synthetic(SyntheticSpec(60, (5.0,), 5, 0.0, seed=3))
    spec = ModelSpec("decision_tree", {"max_depth": 3})
    report = rank_features(spec, table, "y", "permutation", seed=1, repeats=3)
    train_idx, _ = holdout_split(table.n_samples, 1)
    used = train(spec, table.take(train_idx), "y").used_features()
    assert used == {"rel_0"}
    assert report.rank[0] == "rel_0"
    assert all(report.scores[name] == 0.0 for name in table.feature_names if name not in used)
    assert report.metadata["test_size"] == 12


@pytest.mark.parametrize("method", ["permutation", "shapley", "select_k_best"])
def test_rank_deterministic(method):
    table = generate_synthetic(SyntheticSpec(40, (3.0, 1.0), 3, 0.2, seed=5))
    kw = dict(seed=2, repeats=2, n_permutations=10)
    assert rank_features(FAST_GBM, table, "y", method, **kw) == rank_features(FAST_GBM, table, "y", method, **kw)


def test_rank_unknown_method():
    table = generate_synthetic(SyntheticSpec(10, (1.0,), 1, 0.0))
    with pytest.raises(DataError, match="valid methods"):
        rank_features(TREE, table, "y", "lime")


def test_sweep_baseline_only():
    table = generate_synthetic(SyntheticSpec(30, (2.0,), 2, 0.1, seed=1))
    res = feature_sweep(TREE, table, "y", "select_k_best", grid=[100], k=3, seed=0)
    assert res.best_p == 100 and len(res.points) == 1
    assert res.baseline_cv == cross_validate(TREE, table, "y", 3, 0)


def test_sweep_invariants():
    table = generate_synthetic(SyntheticSpec(50, (4.0, 2.0), 6, 0.3, seed=8))
    res = feature_sweep(FAST_GBM, table, "y", "permutation", k=5, seed=3, repeats=2)
    assert res.grid == list(range(10, 101, 10))
    # full-table point is a plain cross-validation
    assert res.points[-1].cv == cross_validate(FAST_GBM, table, "y", 5, 3)
    for small, large in zip(res.points, res.points[1:]):
        assert large.selected_features[: len(small.selected_features)] == small.selected_features
    assert all(pt.selected_features == res.ranking.rank[: n_selected(pt.p, 8)] for pt in res.points)
    assert all(pt.cv.fold_assignments == res.baseline_cv.fold_assignments for pt in res.points)
    best = min(pt.cv.mean_mape for pt in res.points)
    assert res.best_point.cv.mean_mape == best <= res.baseline_cv.mean_mape
    tied = [pt for pt in res.points if pt.cv.mean_mape == best]
    assert res.best_p == min(tied, key=lambda pt: (len(pt.selected_features), pt.p)).p
    lines = res.to_csv().splitlines()
    assert lines[0] == "p,n_features,mean_mape,fold_0,fold_1,fold_2,fold_3,fold_4" and len(lines) == 11


def test_sweep_recovers_relevant_features():
    hits = 0
    for seed in range(3):
        spec = SyntheticSpec(100, (4.0, 3.0, 2.0), 7, 0.5, seed=seed)
        res = feature_sweep(FAST_GBM, generate_synthetic(spec), "y", "permutation", seed=seed, repeats=5)
        hits += set(spec.relevant_names) <= set(res.best_features)
    assert hits >= 2


@pytest.mark.parametrize("grid", [[10, 50], [0, 100], [50, 100, 150], [100, 100]])
def test_sweep_grid_validation(grid):
    table = generate_synthetic(SyntheticSpec(10, (1.0,), 1, 0.0))
    with pytest.raises(DataError):
        feature_sweep(TREE, table, "y", "select_k_best", grid=grid, k=2)


def test_sweep_rejects_foreign_ranking():
    table = generate_synthetic(SyntheticSpec(12, (1.0,), 1, 0.1))
    ranking = rank_features(TREE, table, "y", "select_k_best")
    with pytest.raises(DataError, match="ranking"):
        feature_sweep(TREE, table, "y", "permutation", grid=[100], k=2, ranking=ranking)


def test_interval_full_fraction_is_identity():
    records = generate_synthetic_series(SyntheticSeriesSpec(n_records=15, seed=2))
    res = interval_experiment(TREE, records, "Ra", [1.0], k=3, seed=4)
    assert res.reports[0] == cross_validate(TREE, extract_features(records), "Ra", 3, 4)


def test_interval_prefix_signal_is_enough():
    for seed in range(20):
        records = generate_synthetic_series(SyntheticSeriesSpec(n_records=80, seed=seed))
        res = interval_experiment(TREE, records, "Ra", [0.1, 0.5, 1.0], k=5, seed=seed)
        scores = [r.mean_mape for r in res.reports]
        assert max(scores) <= 1.5 * min(scores)


@pytest.mark.parametrize("fractions", [[0.0, 1.0], [0.5, 0.2], [1.2], []])
def test_interval_rejects_fractions(fractions):
    records = generate_synthetic_series(SyntheticSeriesSpec(n_records=4))
    with pytest.raises(DataError):
        interval_experiment(TREE, records, "Ra", fractions, k=2)


def test_interval_result_serialization():
    records = generate_synthetic_series(SyntheticSeriesSpec(n_records=6, seed=1))
    res = interval_experiment(TREE, records, "Ra", [0.5, 1.0], k=2, seed=0)
    doc = res.to_dict()
    assert doc["fractions"] == [0.5, 1.0] and len(doc["reports"]) == 2
    assert res.to_csv().splitlines()[0] == "fraction,mean_mape,fold_0,fold_1"


def test_synthetic_series_schema():
    records = generate_synthetic_series(SyntheticSeriesSpec(n_records=3, min_length=50, max_length=60))
    assert [r.id for r in records] == ["rec_0000", "rec_0001", "rec_0002"]
    assert set(records[0].channels) == {"fa", "fz"}
    assert all(50 <= ch.size <= 60 for r in records for ch in r.channels.values())
    assert extract_features(records).n_features == 23

import numpy as np
import pytest

from prunekit.data import FeatureTable
from prunekit.models import GbmModel, Model, ModelSpec, TreeParams


def tree_model(tree, feature_names, target="y"):
    """Wrap a hand-built tree as a decision-tree Model."""
    return Model(ModelSpec("decision_tree"), list(feature_names), target, tree)


def additive_model(stages, feature_names, f0=0.0, target="y"):
    """Sum of trees (a GBM with unit learning rate), for constructing known attributions."""
    est = GbmModel(f0, list(stages), 1.0, TreeParams())
    return Model(ModelSpec("gradient_boosting"), list(feature_names), target, est)


@pytest.fixture
def small_table():
    rng = np.random.default_rng(7)
    X = rng.uniform(1.0, 2.0, size=(40, 4))
    y = 3.0 * X[:, 0] + X[:, 1] + 10.0
    return FeatureTable(["a", "b", "c", "d"], X, {"y": y})

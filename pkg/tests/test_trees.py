"""Regression trees and bagged forests: exhaustive-search splitting."""

import numpy as np
import pytest

from doseloop.tree import (
    NodeModel,
    apply_tree,
    fit_cart,
    fit_forest,
    grow_tree,
    iter_leaves,
    predict_forest,
    predict_tree,
    tree_from_json_dict,
    tree_signature,
    tree_to_json_dict,
)


def brute_force_best_split(X, y, min_node_size=1):
    """Independent exhaustive split search: for every feature and every
    midpoint of consecutive distinct values, compute the SSE reduction of a
    constant fit per side with plain numpy means. Returns the best
    (feature, threshold, gain) under the lowest-feature/lowest-threshold
    tie-break."""
    n, p = X.shape
    parent_sse = float(np.sum((y - y.mean()) ** 2))
    best = None
    for j in range(p):
        vals = np.unique(X[:, j])
        for a, b in zip(vals[:-1], vals[1:]):
            t = (a + b) / 2.0
            left = X[:, j] <= t
            nl, nr = int(left.sum()), int((~left).sum())
            if nl < min_node_size or nr < min_node_size:
                continue
            sse = float(np.sum((y[left] - y[left].mean()) ** 2))
            sse += float(np.sum((y[~left] - y[~left].mean()) ** 2))
            gain = parent_sse - sse
            if best is None or gain > best[2] + 1e-12:
                best = (j, t, gain)
    return best


# -- fit_cart ---------------------------------------------------------------


def test_constant_target_single_leaf():
    X = np.random.default_rng(0).normal(size=(50, 3))
    tree = fit_cart(X, np.full(50, 2.5))
    assert tree.is_leaf
    np.testing.assert_allclose(predict_tree(tree, X), 2.5)


def test_step_function_matches_brute_force():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.0, 1.0, 200)
    y = (x > 0.5).astype(float)
    X = x.reshape(-1, 1)
    tree = fit_cart(X, y, min_node_size=1, max_depth=1, cp=0.0)
    j, t, _ = brute_force_best_split(X, y)
    assert tree.feature == j == 0
    assert tree.threshold == pytest.approx(t, abs=1e-12)
    # threshold within one observed gap of the true boundary
    below = x[x <= 0.5].max()
    above = x[x > 0.5].min()
    assert below <= tree.threshold <= above


@pytest.mark.parametrize("seed", range(5))
def test_first_split_matches_brute_force_random_data(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 3))
    y = rng.normal(size=60) + (X[:, 1] > 0.3) * 1.5
    tree = fit_cart(X, y, min_node_size=5, max_depth=1, cp=0.0)
    j, t, gain = brute_force_best_split(X, y, min_node_size=5)
    assert (tree.feature, tree.threshold) == (j, pytest.approx(t, abs=1e-12))


def test_xor_needs_depth_two():
    # 4-cell XOR: no single split improves, depth 2 fits exactly
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float).repeat(10, axis=0)
    y = np.logical_xor(X[:, 0] > 0.5, X[:, 1] > 0.5).astype(float)
    assert brute_force_best_split(X, y)[2] == pytest.approx(0.0, abs=1e-12)
    deep = fit_cart(X, y, min_node_size=1, max_depth=2, cp=0.0)
    np.testing.assert_allclose(predict_tree(deep, X), y, atol=1e-12)
    assert deep.n_leaves() == 4


def test_leaf_value_is_weighted_mean():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(120, 2))
    y = rng.normal(size=120)
    w = rng.uniform(0.5, 2.0, 120)
    tree = fit_cart(X, y, weights=w, min_node_size=10)
    leaf_of = apply_tree(tree, X)
    for li, (leaf, _) in enumerate(iter_leaves(tree)):
        rows = leaf_of == li
        expect = float(np.average(y[rows], weights=w[rows]))
        assert leaf.value == pytest.approx(expect, abs=1e-10)
        assert leaf.n_samples == int(rows.sum())


def test_train_sse_non_increasing_in_depth():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 3))
    y = X[:, 0] + np.sin(3 * X[:, 1]) + rng.normal(0, 0.3, 200)
    prev = np.inf
    for depth in range(0, 6):
        tree = fit_cart(X, y, min_node_size=5, max_depth=depth, cp=0.0)
        sse = float(np.sum((y - predict_tree(tree, X)) ** 2))
        assert sse <= prev + 1e-9
        prev = sse


def test_cp_blocks_small_gains():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(100, 1))
    y = rng.normal(size=100) * 1e-3 + 5.0
    tree = fit_cart(X, y, cp=0.5)
    assert tree.is_leaf


def test_empty_data_rejected():
    with pytest.raises(ValueError):
        fit_cart(np.empty((0, 2)), np.empty(0))


# -- prediction and routing ---------------------------------------------------


def test_threshold_tie_goes_left():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    tree = fit_cart(X, y, min_node_size=1, cp=0.0)
    assert tree.threshold == pytest.approx(0.5)
    assert predict_tree(tree, np.array([[0.5]]))[0] == pytest.approx(0.0)
    assert predict_tree(tree, np.array([[0.5 + 1e-12]]))[0] == pytest.approx(1.0)


def test_missing_routes_to_larger_child():
    rng = np.random.default_rng(5)
    x = np.concatenate([rng.uniform(0, 1, 30), rng.uniform(2, 3, 10)])
    y = np.concatenate([np.zeros(30), np.ones(10)])
    tree = fit_cart(x.reshape(-1, 1), y, min_node_size=1, max_depth=1, cp=0.0)
    assert tree.missing_left  # left child holds 30 of 40 rows
    pred = predict_tree(tree, np.array([[np.nan]]))
    assert pred[0] == pytest.approx(0.0)


def test_missing_rows_excluded_from_scoring_but_routed():
    x = np.array([0.0, 0.1, 0.2, 1.0, 1.1, 1.2, np.nan, np.nan])
    y = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0])
    tree = fit_cart(x.reshape(-1, 1), y, min_node_size=1, max_depth=1, cp=0.0)
    assert tree.threshold == pytest.approx(0.6)
    # the two missing rows join the left child (5 vs 3)
    assert tree.missing_left
    assert tree.left.n_samples == 5


# -- serialization --------------------------------------------------------------


def test_tree_json_round_trip():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(150, 3))
    y = X[:, 0] + (X[:, 2] > 0) * 2 + rng.normal(0, 0.2, 150)
    tree = fit_cart(X, y, min_node_size=10)
    clone = tree_from_json_dict(tree_to_json_dict(tree))
    assert tree_signature(clone) == tree_signature(tree)
    np.testing.assert_array_equal(predict_tree(clone, X), predict_tree(tree, X))


def test_model_tree_payload_round_trip():
    rng = np.random.default_rng(7)
    Z = rng.normal(size=(200, 2))
    R = rng.uniform(0, 8, (200, 1))
    y = np.where(Z[:, 0] <= 0, 1.0 + 0.3 * R[:, 0], -1.0 + 0.8 * R[:, 0])
    tree = grow_tree(Z, y, X_reg=R, min_node_size=20, stopping="ftest")
    clone = tree_from_json_dict(tree_to_json_dict(tree))
    for (a, _), (b, _) in zip(iter_leaves(tree), iter_leaves(clone)):
        assert a.model == b.model


# -- forests --------------------------------------------------------------------


def test_single_tree_forest_equals_cart():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(100, 3))
    y = X[:, 0] + rng.normal(0, 0.2, 100)
    forest = fit_forest(X, y, n_trees=1, bootstrap=False, mtry=3, seed=4)
    cart = fit_cart(X, y)
    assert tree_signature(forest.trees[0]) == tree_signature(cart)
    np.testing.assert_array_equal(predict_forest(forest, X), predict_tree(cart, X))


def test_forest_prediction_is_member_mean():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(80, 2))
    y = X[:, 0] + rng.normal(0, 0.3, 80)
    forest = fit_forest(X, y, n_trees=2, seed=0)
    member_mean = np.mean([predict_tree(t, X) for t in forest.trees], axis=0)
    np.testing.assert_allclose(predict_forest(forest, X), member_mean, atol=1e-12)


def test_forest_deterministic_and_scheduling_independent():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(60, 2))
    y = X[:, 1] + rng.normal(0, 0.3, 60)
    f1 = fit_forest(X, y, n_trees=5, seed=11, mtry=1)
    f2 = fit_forest(X, y, n_trees=5, seed=11, mtry=1)
    assert [tree_signature(t) for t in f1.trees] == [tree_signature(t) for t in f2.trees]
    # member j depends only on (seed, j): a forest of the first 3 members
    f3 = fit_forest(X, y, n_trees=3, seed=11, mtry=1)
    assert [tree_signature(t) for t in f3.trees] == [tree_signature(t) for t in f1.trees[:3]]


def test_forest_variance_reduction():
    wins = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-1, 1, (150, 2))
        f = 2.0 * X[:, 0] + (X[:, 1] > 0.2) * 1.0
        y = f + rng.normal(0, 0.5, 150)
        Xt = rng.uniform(-1, 1, (400, 2))
        ft = 2.0 * Xt[:, 0] + (Xt[:, 1] > 0.2) * 1.0
        yt = ft + rng.normal(0, 0.5, 400)
        forest = fit_forest(X, y, n_trees=20, seed=seed, min_node_size=5, cp=0.0)
        mse_forest = float(np.mean((predict_forest(forest, Xt) - yt) ** 2))
        member_mses = [float(np.mean((predict_tree(t, Xt) - yt) ** 2)) for t in forest.trees]
        wins += mse_forest <= np.mean(member_mses)
    assert wins >= 9


def test_forest_param_validation():
    X = np.zeros((10, 2))
    y = np.zeros(10)
    with pytest.raises(ValueError):
        fit_forest(X, y, n_trees=0)
    with pytest.raises(ValueError):
        fit_forest(X, y, n_trees=2, mtry=0)
    with pytest.raises(ValueError):
        fit_forest(X, y, n_trees=2, mtry=3)


# -- model-tree growth (shared machinery) ---------------------------------------


def test_ftest_zero_gain_not_split():
    # pure noise around a line: candidate-corrected F-test keeps the root
    rng = np.random.default_rng(12)
    Z = rng.normal(size=(300, 3))
    R = rng.uniform(0, 8, (300, 1))
    y = 0.5 + 0.2 * R[:, 0] + rng.normal(0, 0.3, 300)
    tree = grow_tree(Z, y, X_reg=R, stopping="ftest")
    assert tree.is_leaf


def test_ftest_finds_planted_regime_change():
    rng = np.random.default_rng(13)
    Z = rng.normal(size=(400, 2))
    R = rng.uniform(0, 8, (400, 1))
    y = np.where(Z[:, 0] <= 0.2, 1.0 + 0.1 * R[:, 0], -0.5 + 0.5 * R[:, 0])
    y += rng.normal(0, 0.2, 400)
    tree = grow_tree(Z, y, X_reg=R, stopping="ftest")
    assert tree.feature == 0
    assert tree.threshold == pytest.approx(0.2, abs=0.15)
    assert tree.p_value is not None and tree.p_value < 1e-6


def test_leaf_models_are_wls():
    rng = np.random.default_rng(14)
    Z = rng.normal(size=(200, 1))
    R = rng.uniform(0, 8, (200, 1))
    y = np.where(Z[:, 0] <= 0, 1.0 + 0.3 * R[:, 0], 2.0 - 0.2 * R[:, 0])
    y += rng.normal(0, 0.1, 200)
    tree = grow_tree(Z, y, X_reg=R, stopping="ftest")
    leaf_of = apply_tree(tree, Z)
    for li, (leaf, _) in enumerate(iter_leaves(tree)):
        rows = leaf_of == li
        D = np.column_stack([np.ones(rows.sum()), R[rows]])
        beta = np.linalg.lstsq(D, y[rows], rcond=None)[0]
        assert leaf.model.beta0 == pytest.approx(beta[0], abs=1e-8)
        assert leaf.model.beta1[0] == pytest.approx(beta[1], abs=1e-8)


def test_node_model_predict():
    m = NodeModel(1.0, (2.0,))
    np.testing.assert_allclose(m.predict(np.array([[0.0], [3.0]])), [1.0, 7.0])
    const = NodeModel(4.0)
    np.testing.assert_allclose(const.predict(np.zeros((2, 0))), [4.0, 4.0])

"""Mixed-effects model trees: alternation, prediction modes, dose grids."""

import datetime

import numpy as np
import pytest

from doseloop.dataset import Dataset
from doseloop.glmmtree import (
    BaggedGlmmTreeRegressor,
    GlmmTreeRegressor,
    fit_bagged_glmm_tree,
    fit_glmm_tree,
)
from doseloop.synthetic import generate_synthetic, two_leaf_truth
from doseloop.tree import apply_tree, grow_tree, iter_leaves, tree_signature


def _clustered(seed, g=40, m=10, sigma_b=0.3, sigma=0.2):
    """Two-regime clustered data; returns (X, y, clusters, b_by_label)."""
    rng = np.random.default_rng(seed)
    n = g * m
    z = rng.uniform(-1, 1, (n, 2))
    dose = rng.uniform(0, 8, n)
    b = rng.normal(0, sigma_b, g)
    ci = np.repeat(np.arange(g), m)
    mu = np.where(z[:, 0] <= 0, -0.33 + 0.226 * dose, -0.46 + 0.34 * dose)
    y = mu + b[ci] + rng.normal(0, sigma, n)
    X = np.column_stack([z, dose])
    clusters = np.array([f"P{i:03d}" for i in ci], dtype=object)
    labels = [f"P{i:03d}" for i in range(g)]
    return X, y, clusters, dict(zip(labels, b))


FEATURES = ("z1", "z2", "EPO_DOSE")


def test_single_regime_single_leaf():
    rng = np.random.default_rng(0)
    g, m = 40, 10
    n = g * m
    z = rng.uniform(-1, 1, (n, 2))
    dose = rng.uniform(0, 8, n)
    ci = np.repeat(np.arange(g), m)
    b = rng.normal(0, 0.3, g)
    y = 0.5 + 0.25 * dose + b[ci] + rng.normal(0, 0.2, n)
    X = np.column_stack([z, dose])
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
        X, y, clusters=ci, feature_names=FEATURES
    )
    assert est.tree_.is_leaf
    # the root model is close to the generating line
    se = 0.2 / np.sqrt(n)
    assert est.tree_.model.beta0 == pytest.approx(0.5, abs=10 * se)
    assert est.tree_.model.beta1[0] == pytest.approx(0.25, abs=0.01)
    assert est.sigma_b2_ == pytest.approx(0.09, rel=0.5)
    assert est.converged_


def test_two_leaf_truth_recovered():
    truth = two_leaf_truth(n_clusters=300, visits_per_cluster=30)
    d, _ = generate_synthetic(truth, seed=1)
    est = fit_glmm_tree(d)
    assert est.tree_.n_leaves() == 2
    assert est.partitioners_[est.tree_.feature] == "z1"
    assert est.tree_.threshold == pytest.approx(0.0, abs=0.1)
    leaves = [leaf for leaf, _ in iter_leaves(est.tree_)]
    assert leaves[0].model.beta0 == pytest.approx(-0.33, abs=0.05)
    assert leaves[0].model.beta1[0] == pytest.approx(0.226, abs=0.05)
    assert leaves[1].model.beta0 == pytest.approx(-0.46, abs=0.05)
    assert leaves[1].model.beta1[0] == pytest.approx(0.253, abs=0.05)


def test_single_pass_matches_plain_tree():
    # with the true intercepts supplied and one iteration, the estimator's
    # tree is exactly the plain model tree grown on the adjusted response
    X, y, clusters, b_map = _clustered(seed=1)
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",), max_iter=1).fit(
        X, y, clusters=clusters, feature_names=FEATURES, initial_intercepts=b_map
    )
    b = np.array([b_map[c] for c in clusters])
    ref = grow_tree(X[:, :2], y - b, X_reg=X[:, 2:], stopping="ftest")
    assert tree_signature(est.tree_) == tree_signature(ref)
    assert est.n_iter_ == 1


def test_leaf_models_are_wls_on_adjusted_response():
    X, y, clusters, _ = _clustered(seed=2)
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    b = np.array([est.b_hat_[c] for c in clusters])
    y_star = y - b
    leaf_of = apply_tree(est.tree_, X[:, :2])
    for li, (leaf, _) in enumerate(iter_leaves(est.tree_)):
        rows = leaf_of == li
        D = np.column_stack([np.ones(rows.sum()), X[rows, 2]])
        beta = np.linalg.lstsq(D, y_star[rows], rcond=None)[0]
        assert leaf.model.beta0 == pytest.approx(beta[0], abs=1e-8)
        assert leaf.model.beta1[0] == pytest.approx(beta[1], abs=1e-8)


def test_conditional_offsets_by_intercept():
    X, y, clusters, _ = _clustered(seed=3, g=20, m=12)
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    marginal = est.predict(X)
    conditional = est.predict(X, clusters=clusters, mode="conditional")
    b = np.array([est.b_hat_[c] for c in clusters])
    np.testing.assert_allclose(conditional - marginal, b, atol=1e-12)
    # unseen patients fall back to the marginal prediction
    unseen = est.predict(X, clusters=["NEW"] * len(X), mode="conditional")
    np.testing.assert_array_equal(unseen, marginal)
    np.testing.assert_array_equal(est.predict(X, mode="conditional"), marginal)


def test_conditional_beats_marginal_in_cluster():
    X, y, clusters, _ = _clustered(seed=4, g=60, m=15, sigma_b=0.5)
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    mae_m = np.mean(np.abs(y - est.predict(X)))
    mae_c = np.mean(np.abs(y - est.predict(X, clusters=clusters, mode="conditional")))
    assert mae_c < mae_m


def test_dose_response_known_rule():
    # engineered cohort lying on one published dose-response line
    rng = np.random.default_rng(5)
    g, m = 12, 20
    n = g * m
    dose = rng.uniform(0, 8, n)
    X = np.column_stack([np.zeros(n), dose])
    ci = np.repeat(np.arange(g), m)
    y = -0.3306171 + 0.2261024 * dose + rng.normal(0, 1e-6, n)
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",), partitioners=("z",)).fit(
        X, y, clusters=ci, feature_names=("z", "EPO_DOSE")
    )
    assert est.tree_.is_leaf
    pts = est.dose_response({"z": 0.0, "EPO_DOSE": 2.0}, current_hb=10.0, dose_grid=[0, 4])
    assert [p.dose for p in pts] == [0.0, 4.0]
    assert pts[1].delta_hb == pytest.approx(0.5737925, abs=5e-4)
    assert pts[0].projected_hb == pytest.approx(9.6693829, abs=5e-4)
    assert pts[1].projected_hb == pytest.approx(10.5737925, abs=5e-4)
    assert pts[0].projected_hb == pytest.approx(10.0 + pts[0].delta_hb, abs=1e-12)


def test_dose_response_accepts_vector_and_validates():
    X, y, clusters, _ = _clustered(seed=6, g=15, m=10)
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    a = est.dose_response({"z1": -0.5, "z2": 0.1, "EPO_DOSE": 1.0}, 10.0, [0, 2, 4])
    b = est.dose_response(np.array([-0.5, 0.1, 1.0]), 10.0, [0, 2, 4])
    assert [p.projected_hb for p in a] == [p.projected_hb for p in b]
    with pytest.raises(ValueError):
        est.dose_response({"z1": 0.0}, 10.0, [])
    with pytest.raises(ValueError):
        est.dose_response({"z1": 0.0}, 10.0, [np.nan])
    # conditional mode shifts every grid point by the same patient intercept
    lab = clusters[0]
    cond = est.dose_response({"z1": -0.5, "z2": 0.1, "EPO_DOSE": 1.0}, 10.0, [0, 4], cluster=lab)
    shift = est.b_hat_[lab]
    for pm, pc in zip((a[0], a[2]), cond):
        assert pc.delta_hb == pytest.approx(pm.delta_hb + shift, abs=1e-12)


def test_rule_set_names_partitioners():
    X, y, clusters, _ = _clustered(seed=7, g=20, m=10)
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    rs = est.rule_set(version=4)
    assert rs.version == 4
    assert rs.regressors == ("EPO_DOSE",)
    feats = {c.feature for r in rs.rules for c in r.conditions}
    assert feats <= {"z1", "z2"}
    assert sum(r.support for r in rs.rules) == len(y)


def test_input_validation():
    X, y, clusters, _ = _clustered(seed=8, g=10, m=8)
    with pytest.raises(ValueError):
        GlmmTreeRegressor(regressors=("EPO_DOSE",), partitioners=("EPO_DOSE",)).fit(
            X, y, clusters=clusters, feature_names=FEATURES
        )
    with pytest.raises(ValueError):
        GlmmTreeRegressor(regressors=("nope",)).fit(X, y, clusters=clusters, feature_names=FEATURES)
    with pytest.raises(ValueError):
        GlmmTreeRegressor(regressors=("EPO_DOSE",), max_iter=0).fit(
            X, y, clusters=clusters, feature_names=FEATURES
        )
    bad = X.copy()
    bad[0, 2] = np.nan  # dose is a regressor; missing dose is not imputable
    with pytest.raises(ValueError):
        GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
            bad, y, clusters=clusters, feature_names=FEATURES
        )
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    with pytest.raises(ValueError):
        est.predict(X[:, :2])
    with pytest.raises(ValueError):
        est.predict(X, mode="posterior")


def test_single_cluster_flagged():
    X, y, _, _ = _clustered(seed=9, g=10, m=10)
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
        X, y, clusters=np.zeros(len(y), dtype=int), feature_names=FEATURES
    )
    assert "single_cluster" in est.flags_


def test_dataset_wrapper_masks_missing_targets():
    X, y, clusters, _ = _clustered(seed=10, g=20, m=10)
    target = y.copy()
    target[::37] = np.nan
    dates = [datetime.date(2020, 1, 1) + datetime.timedelta(days=i) for i in range(len(y))]
    d = Dataset(
        schema=FEATURES,
        patient_ids=clusters,
        care_dates=dates,
        X=X,
        target=target,
        target_name="delta_Hb",
    )
    est = fit_glmm_tree(d)
    assert est.tree_.n_samples == int(np.sum(~np.isnan(target)))


# -- bagging --------------------------------------------------------------------


def test_bagged_single_member_no_bootstrap_equals_single():
    X, y, clusters, _ = _clustered(seed=11, g=25, m=10)
    single = GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    bagged = BaggedGlmmTreeRegressor(n_trees=1, bootstrap=False, regressors=("EPO_DOSE",)).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    assert tree_signature(bagged.members_[0].tree_) == tree_signature(single.tree_)
    np.testing.assert_array_equal(bagged.predict(X), single.predict(X))
    np.testing.assert_array_equal(
        bagged.predict(X, clusters=clusters, mode="conditional"),
        single.predict(X, clusters=clusters, mode="conditional"),
    )


def test_bagged_prediction_is_member_mean():
    X, y, clusters, _ = _clustered(seed=12, g=25, m=8)
    bagged = BaggedGlmmTreeRegressor(n_trees=2, regressors=("EPO_DOSE",), random_state=3).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    member_mean = np.mean([m.predict(X) for m in bagged.members_], axis=0)
    np.testing.assert_allclose(bagged.predict(X), member_mean, atol=1e-12)


def test_bagged_deterministic_and_schedule_independent():
    X, y, clusters, _ = _clustered(seed=13, g=20, m=8)
    b3 = BaggedGlmmTreeRegressor(n_trees=3, regressors=("EPO_DOSE",), random_state=7).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    b3b = BaggedGlmmTreeRegressor(n_trees=3, regressors=("EPO_DOSE",), random_state=7).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    np.testing.assert_array_equal(b3.predict(X), b3b.predict(X))
    # member j depends only on (random_state, j), not on n_trees
    b1 = BaggedGlmmTreeRegressor(n_trees=1, regressors=("EPO_DOSE",), random_state=7).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    assert tree_signature(b1.members_[0].tree_) == tree_signature(b3.members_[0].tree_)


def test_bagged_intercepts_average_copies():
    X, y, clusters, _ = _clustered(seed=14, g=15, m=8)
    bagged = BaggedGlmmTreeRegressor(n_trees=2, regressors=("EPO_DOSE",), random_state=1).fit(
        X, y, clusters=clusters, feature_names=FEATURES
    )
    for member, b_map in zip(bagged.members_, bagged.member_b_):
        for lab, val in b_map.items():
            copies = [v for k, v in member.b_hat_.items() if k.rsplit("#", 1)[0] == lab]
            assert val == pytest.approx(np.mean(copies), abs=1e-12)
    # conditional - marginal equals the mean patient offset over members
    cond = bagged.predict(X, clusters=clusters, mode="conditional")
    marg = bagged.predict(X)
    offs = np.mean(
        [[bm.get(c, 0.0) for c in clusters] for bm in bagged.member_b_], axis=0
    )
    np.testing.assert_allclose(cond - marg, offs, atol=1e-12)


def test_bagged_dataset_wrapper():
    truth = two_leaf_truth(n_clusters=40, visits_per_cluster=8)
    d, _ = generate_synthetic(truth, seed=1)
    bagged = fit_bagged_glmm_tree(d, n_trees=2, random_state=0)
    assert len(bagged.members_) == 2
    assert bagged.feature_names_ == d.schema
    with pytest.raises(ValueError):
        fit_bagged_glmm_tree(d, n_trees=0)

"""Model persistence: JSON directories round-trip to equal predictions."""

import json

import numpy as np
import pytest

from doseloop.glmmtree import BaggedGlmmTreeRegressor, GlmmTreeRegressor
from doseloop.lmm import fit_lmm
from doseloop.persist import PersistError, load_model, save_model
from doseloop.tree import CartRegressor, ForestRegressor


def _tabular(seed, n=300):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 3))
    y = np.where(X[:, 0] <= 0.2, 1.0, -0.5) + 0.3 * X[:, 1] + rng.normal(0, 0.2, n)
    return X, y


def _clustered(seed, g=30, m=8):
    rng = np.random.default_rng(seed)
    n = g * m
    z = rng.uniform(-1, 1, (n, 2))
    dose = rng.uniform(0, 8, n)
    ci = np.repeat(np.arange(g), m)
    b = rng.normal(0, 0.3, g)
    y = np.where(z[:, 0] <= 0, -0.33 + 0.226 * dose, -0.46 + 0.34 * dose)
    y += b[ci] + rng.normal(0, 0.2, n)
    X = np.column_stack([z, dose])
    clusters = np.array([f"P{i:03d}" for i in ci], dtype=object)
    return X, y, clusters


def test_cart_round_trip(tmp_path):
    X, y = _tabular(0)
    est = CartRegressor(min_node_size=10).fit(X, y)
    save_model(tmp_path / "m", est, "cart", feature_names=("a", "b", "c"))
    loaded = load_model(tmp_path / "m")
    assert loaded.kind == "cart"
    assert loaded.feature_names == ("a", "b", "c")
    Xt = np.random.default_rng(1).uniform(-1, 1, (100, 3))
    np.testing.assert_array_equal(loaded.predict(Xt), est.predict(Xt))
    rs = loaded.rule_set(version=2)
    assert rs.version == 2
    assert len(rs.rules) == est.tree_.n_leaves()


def test_forest_round_trip(tmp_path):
    X, y = _tabular(2)
    est = ForestRegressor(n_trees=5, random_state=3).fit(X, y)
    save_model(tmp_path / "m", est, "forest", feature_names=("a", "b", "c"))
    loaded = load_model(tmp_path / "m")
    Xt = np.random.default_rng(3).uniform(-1, 1, (80, 3))
    np.testing.assert_array_equal(loaded.predict(Xt), est.predict(Xt))
    assert loaded.forest.n_trees == 5
    assert loaded.forest.seed == 3


def test_lmm_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    n = 200
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    clusters = np.array([f"C{i}" for i in rng.integers(0, 12, n)], dtype=object)
    y = 1.0 + 0.5 * x1 - 0.3 * x2 + rng.normal(0, 0.3, n)
    D = np.column_stack([np.ones(n), x1, x2])
    fit = fit_lmm(D, y, clusters, feature_names=("intercept", "x1", "x2"))
    save_model(tmp_path / "m", fit, "lmm", feature_names=("x1", "x2"), target_name="delta_Hb")
    loaded = load_model(tmp_path / "m")
    Xt = rng.normal(size=(50, 2))
    expect = fit.beta[0] + Xt @ fit.beta[1:]
    np.testing.assert_allclose(loaded.predict(Xt), expect, atol=1e-12)
    # conditional adds the stored patient intercepts
    ct = np.array(["C3"] * 50, dtype=object)
    np.testing.assert_allclose(
        loaded.predict(Xt, clusters=ct, mode="conditional"),
        expect + fit.b_hat["C3"],
        atol=1e-12,
    )
    assert loaded.meta["target_name"] == "delta_Hb"


def test_glmmtree_round_trip(tmp_path):
    X, y, clusters = _clustered(5)
    est = GlmmTreeRegressor(regressors=("EPO_DOSE",)).fit(
        X, y, clusters=clusters, feature_names=("z1", "z2", "EPO_DOSE")
    )
    save_model(
        tmp_path / "m",
        est,
        "glmmtree",
        feature_names=("z1", "z2", "EPO_DOSE"),
        params={"alpha_split": 0.05},
    )
    loaded = load_model(tmp_path / "m")
    assert loaded.meta["regressors"] == ["EPO_DOSE"]
    assert loaded.meta["partitioners"] == ["z1", "z2"]
    assert loaded.meta["params"] == {"alpha_split": 0.05}
    Xt, _, ct = _clustered(6)
    np.testing.assert_array_equal(loaded.predict(Xt), est.predict(Xt))
    np.testing.assert_array_equal(
        loaded.predict(Xt, clusters=ct, mode="conditional"),
        est.predict(Xt, clusters=ct, mode="conditional"),
    )
    assert loaded.rule_set(version=1) == est.rule_set(version=1)
    # rules.json sits alongside for the webui
    rules = json.loads((tmp_path / "m" / "rules.json").read_text())
    assert rules["regressors"] == ["EPO_DOSE"]


def test_bagged_round_trip(tmp_path):
    X, y, clusters = _clustered(7, g=20, m=6)
    est = BaggedGlmmTreeRegressor(n_trees=2, regressors=("EPO_DOSE",), random_state=1).fit(
        X, y, clusters=clusters, feature_names=("z1", "z2", "EPO_DOSE")
    )
    save_model(tmp_path / "m", est, "bagged-glmmtree", feature_names=("z1", "z2", "EPO_DOSE"))
    loaded = load_model(tmp_path / "m")
    Xt, _, ct = _clustered(8, g=20, m=6)
    np.testing.assert_allclose(loaded.predict(Xt), est.predict(Xt), atol=1e-12)
    np.testing.assert_allclose(
        loaded.predict(Xt, clusters=ct, mode="conditional"),
        est.predict(Xt, clusters=ct, mode="conditional"),
        atol=1e-12,
    )
    assert len(loaded.members) == 2


def test_errors(tmp_path):
    X, y = _tabular(9)
    est = CartRegressor().fit(X, y)
    with pytest.raises(PersistError):
        save_model(tmp_path / "m", est, "mystery", feature_names=("a", "b", "c"))
    with pytest.raises(PersistError):
        load_model(tmp_path / "nothing-here")
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "meta.json").write_text('{"kind": "mystery", "feature_names": []}')
    with pytest.raises(PersistError):
        load_model(bad)
    save_model(tmp_path / "f", ForestRegressor(n_trees=2).fit(X, y), "forest", feature_names=("a", "b", "c"))
    with pytest.raises(PersistError):
        load_model(tmp_path / "f").rule_set()

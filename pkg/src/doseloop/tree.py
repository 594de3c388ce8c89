"""Regression trees with constant or linear leaf models, plus bagged forests.

One growth engine covers two regimes: the classic constant-leaf regression
tree (leaf model = weighted mean, cp-style stopping) and the model-based
tree whose leaves carry linear dose-response models (F-test stopping, used
by the mixed-model tree). Split search is exhaustive over midpoints of
consecutive distinct feature values; candidate children are scored by the
weighted SSE of their own least-squares model, accumulated with prefix-sum
Gram matrices so one feature scan costs a sort plus vectorized algebra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin

from .validation import (
    check_consistent_length,
    check_matrix,
    check_rng,
    check_sample_weight,
    check_vector,
)

__all__ = [
    "NodeModel",
    "TreeNode",
    "grow_tree",
    "predict_tree",
    "apply_tree",
    "tree_signature",
    "iter_leaves",
    "fit_cart",
    "Forest",
    "fit_forest",
    "predict_forest",
    "tree_to_json_dict",
    "tree_from_json_dict",
    "CartRegressor",
    "ForestRegressor",
]

_SEED_MASK = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class NodeModel:
    """Linear leaf model: prediction = beta0 + beta1 . regressors.

    An empty beta1 denotes a constant-leaf model (plain regression tree).
    """

    beta0: float
    beta1: tuple = ()

    def predict(self, X_reg=None) -> np.ndarray:
        if len(self.beta1) == 0:
            if X_reg is None:
                raise ValueError("constant model needs an explicit row count")
            n = len(X_reg)
            return np.full(n, self.beta0, dtype=np.float64)
        X_reg = np.asarray(X_reg, dtype=np.float64)
        if X_reg.ndim == 1:
            X_reg = X_reg.reshape(-1, len(self.beta1))
        return self.beta0 + X_reg @ np.asarray(self.beta1, dtype=np.float64)


@dataclass
class TreeNode:
    """A node of a grown tree; leaves have left is None and right is None."""

    n_samples: int
    value: float
    sse: float
    model: NodeModel
    feature: int | None = None
    threshold: float | None = None
    missing_left: bool = True
    p_value: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def n_leaves(self) -> int:
        if self.is_leaf:
            return 1
        return self.left.n_leaves() + self.right.n_leaves()

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())


@dataclass(frozen=True)
class _SplitCandidate:
    feature: int
    threshold: float
    gain: float
    sse_parent: float
    sse_children: float
    n_finite: int
    n_left: int
    n_right: int


def _fit_leaf_model(y, w, R):
    """Weighted least squares on (1, R); returns (model, value, sse)."""
    wsum = w.sum()
    value = float((w @ y) / wsum) if wsum > 0 else float(np.mean(y))
    if R.shape[1] == 0:
        resid = y - value
        return NodeModel(value), value, float(w @ (resid * resid))
    D = np.column_stack([np.ones(len(y)), R])
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(D * sw[:, None], y * sw, rcond=None)
    resid = y - D @ beta
    sse = float(w @ (resid * resid))
    return NodeModel(float(beta[0]), tuple(float(b) for b in beta[1:])), value, sse


def _child_sse(G, c, q):
    """SSE of the WLS fit per candidate child from Gram blocks (batched)."""
    d = G.shape[-1]
    if d == 1:
        g = G[..., 0, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            explained = np.where(g > 0.0, c[..., 0] ** 2 / np.where(g > 0.0, g, 1.0), 0.0)
        return np.maximum(q - explained, 0.0)
    Ginv = np.linalg.pinv(G)
    beta = np.einsum("...ij,...j->...i", Ginv, c)
    return np.maximum(q - np.einsum("...i,...i->...", c, beta), 0.0)


def _best_split(Zn, Dn, yn, wn, feature_ids, min_node_size):
    """Exhaustive midpoint split search; ties go to the lowest feature index
    then the lowest threshold (ascending scan with strict improvement).

    Returns (best candidate or None, number of candidate splits examined);
    the count feeds the Bonferroni correction of the acceptance test."""
    best: _SplitCandidate | None = None
    best_gain = -np.inf
    n_candidates = 0
    for j in feature_ids:
        zj = Zn[:, j]
        finite = ~np.isnan(zj)
        nf = int(finite.sum())
        if nf < 2 * min_node_size:
            continue
        order = np.argsort(zj[finite], kind="stable")
        zs = zj[finite][order]
        Ds = Dn[finite][order]
        ys = yn[finite][order]
        ws = wn[finite][order]

        wD = Ds * ws[:, None]
        G_pref = np.cumsum(wD[:, :, None] * Ds[:, None, :], axis=0)
        c_pref = np.cumsum(wD * ys[:, None], axis=0)
        q_pref = np.cumsum(ws * ys * ys)

        ks = np.arange(min_node_size - 1, nf - min_node_size)
        if ks.size == 0:
            continue
        ks = ks[zs[ks] < zs[ks + 1]]
        if ks.size == 0:
            continue
        n_candidates += ks.size

        GT, cT, qT = G_pref[-1], c_pref[-1], q_pref[-1]
        sse_parent = float(_child_sse(GT[None], cT[None], np.array([qT]))[0])
        sse_left = _child_sse(G_pref[ks], c_pref[ks], q_pref[ks])
        sse_right = _child_sse(GT - G_pref[ks], cT - c_pref[ks], qT - q_pref[ks])
        gains = sse_parent - (sse_left + sse_right)

        i = int(np.argmax(gains))  # first max -> lowest threshold
        if gains[i] > best_gain:
            k = int(ks[i])
            best_gain = float(gains[i])
            best = _SplitCandidate(
                feature=j,
                threshold=float((zs[k] + zs[k + 1]) / 2.0),
                gain=best_gain,
                sse_parent=sse_parent,
                sse_children=float(sse_left[i] + sse_right[i]),
                n_finite=nf,
                n_left=k + 1,
                n_right=nf - k - 1,
            )
    return best, n_candidates


def _split_accepted(best, *, stopping, cp, root_sse, alpha_split, n_candidates, d):
    """Apply the stopping rule; returns (accepted, p_value_or_None)."""
    if stopping == "cp":
        return best.gain >= cp * root_sse, None
    # F-test on the best split: extra d parameters from fitting two models.
    # The best candidate was selected by maximizing gain over n_candidates
    # (feature, threshold) pairs, so the raw p-value is Bonferroni-corrected
    # by that count; without it a noise node with thousands of candidates
    # splits almost surely (max-gain selection inflates F to ~2*log(count)).
    df2 = best.n_finite - 2 * d
    if df2 <= 0:
        return False, None
    if best.sse_children <= 1e-12 * max(best.sse_parent, 1.0):
        p = 0.0 if best.gain > 0.0 else 1.0
    else:
        F = (best.gain / d) / (best.sse_children / df2)
        p = float(stats.f.sf(F, d, df2))
    return p * max(n_candidates, 1) <= alpha_split, p


def grow_tree(
    Z,
    y,
    *,
    weights=None,
    X_reg=None,
    min_node_size: int = 20,
    max_depth: int = 10,
    cp: float = 0.001,
    stopping: str = "cp",
    alpha_split: float = 0.05,
    mtry: int | None = None,
    rng=None,
) -> TreeNode:
    """Grow a regression tree on partitioning features Z.

    With X_reg=None every node holds a constant model and stopping="cp"
    applies the relative-SSE-improvement rule (split kept iff its gain is
    at least cp times the root SSE). With X_reg given, nodes hold linear
    models on (1, X_reg) and stopping="ftest" keeps the best split iff its
    F-test p-value, Bonferroni-corrected for the number of candidate splits
    examined at the node, stays below alpha_split. min_node_size counts
    rows, missing included once routed.
    """
    if stopping not in ("cp", "ftest"):
        raise ValueError(f"unknown stopping rule {stopping!r}")
    Z = check_matrix(Z, "Z", allow_nan=True)
    y = check_vector(y, "y")
    n = check_consistent_length(Z, y, names=("Z", "y"))
    if n == 0:
        raise ValueError("cannot grow a tree on empty data")
    w = check_sample_weight(weights, n)
    if X_reg is None:
        R = np.empty((n, 0), dtype=np.float64)
    else:
        R = check_matrix(X_reg, "X_reg")
        check_consistent_length(Z, R, names=("Z", "X_reg"))
    if min_node_size < 1:
        raise ValueError("min_node_size must be >= 1")
    n_partitioners = Z.shape[1]
    d = 1 + R.shape[1]
    rng = check_rng(rng) if (mtry is not None and mtry < n_partitioners) else rng

    def build(idx: np.ndarray, depth: int, root_sse: float | None) -> TreeNode:
        yn, wn, Rn = y[idx], w[idx], R[idx]
        model, value, sse = _fit_leaf_model(yn, wn, Rn)
        node = TreeNode(n_samples=len(idx), value=value, sse=sse, model=model)
        if root_sse is None:
            root_sse = sse
        if depth >= max_depth or len(idx) < 2 * min_node_size or len(idx) < d + 1:
            return node
        if sse <= 0.0:
            return node

        if mtry is not None and mtry < n_partitioners:
            feats = np.sort(rng.choice(n_partitioners, size=mtry, replace=False))
        else:
            feats = np.arange(n_partitioners)

        # Center response and regressors at the node; child WLS SSE with an
        # intercept column is invariant to these shifts.
        wsum = wn.sum()
        yc = yn - (wn @ yn) / wsum if wsum > 0 else yn - yn.mean()
        if R.shape[1] and wsum > 0:
            Rc = Rn - (wn @ Rn) / wsum
        else:
            Rc = Rn
        Dn = np.column_stack([np.ones(len(idx)), Rc])

        best, n_candidates = _best_split(Z[idx], Dn, yc, wn, feats, min_node_size)
        if best is None:
            return node
        accepted, p = _split_accepted(
            best,
            stopping=stopping,
            cp=cp,
            root_sse=root_sse,
            alpha_split=alpha_split,
            n_candidates=n_candidates,
            d=d,
        )
        if not accepted:
            return node

        zv = Z[idx, best.feature]
        miss = np.isnan(zv)
        with np.errstate(invalid="ignore"):
            go_left = zv <= best.threshold
        missing_left = best.n_left >= best.n_right
        go_left[miss] = missing_left

        node.feature = best.feature
        node.threshold = best.threshold
        node.missing_left = missing_left
        node.p_value = p
        node.left = build(idx[go_left], depth + 1, root_sse)
        node.right = build(idx[~go_left], depth + 1, root_sse)
        return node

    return build(np.arange(n), 0, None)


def _route(node: TreeNode, Z: np.ndarray, idx: np.ndarray, out: np.ndarray, leaf_counter):
    if node.is_leaf:
        out[idx] = leaf_counter[0]
        leaf_counter[0] += 1
        return
    # Preorder: the leaf counter advances left subtree first.
    zv = Z[idx, node.feature]
    miss = np.isnan(zv)
    with np.errstate(invalid="ignore"):
        go_left = zv <= node.threshold
    go_left[miss] = node.missing_left
    _route(node.left, Z, idx[go_left], out, leaf_counter)
    _route(node.right, Z, idx[~go_left], out, leaf_counter)


def apply_tree(tree: TreeNode, Z) -> np.ndarray:
    """Leaf index (preorder, left-first) for every row of Z."""
    Z = check_matrix(Z, "Z", allow_nan=True)
    out = np.empty(len(Z), dtype=np.int64)
    _route(tree, Z, np.arange(len(Z)), out, [0])
    return out


def iter_leaves(tree: TreeNode):
    """Yield (leaf, path) pairs in preorder; path items are
    (feature, op, threshold) with op in {"le", "gt"}."""

    def walk(node, path):
        if node.is_leaf:
            yield node, tuple(path)
            return
        yield from walk(node.left, path + [(node.feature, "le", node.threshold)])
        yield from walk(node.right, path + [(node.feature, "gt", node.threshold)])

    yield from walk(tree, [])


def predict_tree(tree: TreeNode, Z, X_reg=None) -> np.ndarray:
    """Route rows to leaves and evaluate the leaf models."""
    Z = check_matrix(Z, "Z", allow_nan=True)
    n = len(Z)
    if X_reg is not None:
        X_reg = check_matrix(X_reg, "X_reg")
        check_consistent_length(Z, X_reg, names=("Z", "X_reg"))
    out = np.empty(n, dtype=np.float64)
    leaf_of = apply_tree(tree, Z)
    for li, (leaf, _) in enumerate(iter_leaves(tree)):
        mask = leaf_of == li
        if not mask.any():
            continue
        if len(leaf.model.beta1) == 0:
            out[mask] = leaf.model.beta0
        else:
            if X_reg is None:
                raise ValueError("tree has linear leaf models; X_reg is required")
            out[mask] = leaf.model.predict(X_reg[mask])
    return out


def tree_signature(tree: TreeNode):
    """Nested tuple of split features/thresholds; equal signatures mean
    identical split structure."""
    if tree.is_leaf:
        return ("leaf",)
    return (
        tree.feature,
        tree.threshold,
        tree_signature(tree.left),
        tree_signature(tree.right),
    )


def tree_to_json_dict(tree: TreeNode) -> dict:
    """Plain-JSON form of a grown tree (floats round-trip via repr)."""
    d = {
        "n_samples": int(tree.n_samples),
        "value": float(tree.value),
        "sse": float(tree.sse),
        "model": {
            "beta0": float(tree.model.beta0),
            "beta1": [float(b) for b in tree.model.beta1],
        },
    }
    if not tree.is_leaf:
        d["feature"] = int(tree.feature)
        d["threshold"] = float(tree.threshold)
        d["missing_left"] = bool(tree.missing_left)
        d["p_value"] = None if tree.p_value is None else float(tree.p_value)
        d["left"] = tree_to_json_dict(tree.left)
        d["right"] = tree_to_json_dict(tree.right)
    return d


def tree_from_json_dict(d: dict) -> TreeNode:
    node = TreeNode(
        n_samples=int(d["n_samples"]),
        value=float(d["value"]),
        sse=float(d["sse"]),
        model=NodeModel(
            float(d["model"]["beta0"]), tuple(float(b) for b in d["model"]["beta1"])
        ),
    )
    if "left" in d:
        node.feature = int(d["feature"])
        node.threshold = float(d["threshold"])
        node.missing_left = bool(d["missing_left"])
        node.p_value = None if d.get("p_value") is None else float(d["p_value"])
        node.left = tree_from_json_dict(d["left"])
        node.right = tree_from_json_dict(d["right"])
    return node


def fit_cart(
    X,
    y,
    weights=None,
    *,
    min_node_size: int = 20,
    max_depth: int = 10,
    cp: float = 0.001,
    mtry: int | None = None,
    rng=None,
) -> TreeNode:
    """Grow a constant-leaf regression tree (exhaustive SSE-reduction CART)."""
    return grow_tree(
        X,
        y,
        weights=weights,
        X_reg=None,
        min_node_size=min_node_size,
        max_depth=max_depth,
        cp=cp,
        stopping="cp",
        mtry=mtry,
        rng=rng,
    )


@dataclass(frozen=True)
class Forest:
    """Bagged ensemble of constant-leaf trees."""

    trees: tuple
    n_trees: int
    mtry: int | None
    bootstrap: bool
    seed: int


def _fit_forest_member(X, y, w, tree_index, seed, *, mtry, min_node_size, max_depth, cp, bootstrap):
    """Fit one bagged member; pure in (data, tree_index, seed) so member
    fits are scheduling-independent."""
    member_seed = (int(seed) ^ int(tree_index)) & _SEED_MASK
    rng = np.random.default_rng(member_seed)
    n = len(y)
    if bootstrap:
        idx = rng.integers(0, n, size=n)
        Xb, yb, wb = X[idx], y[idx], w[idx]
    else:
        Xb, yb, wb = X, y, w
    eff_mtry = mtry if (mtry is not None and mtry < X.shape[1]) else None
    return grow_tree(
        Xb,
        yb,
        weights=wb,
        min_node_size=min_node_size,
        max_depth=max_depth,
        cp=cp,
        stopping="cp",
        mtry=eff_mtry,
        rng=rng,
    )


def fit_forest(
    X,
    y,
    weights=None,
    *,
    n_trees: int = 100,
    mtry: int | None = None,
    min_node_size: int = 20,
    max_depth: int = 10,
    cp: float = 0.001,
    bootstrap: bool = True,
    seed: int = 0,
) -> Forest:
    """Fit a bagged forest of regression trees.

    Member seeds are seed XOR tree-index, so the ensemble is independent of
    fitting order. mtry=None uses max(1, p // 3) features per split.
    """
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    X = check_matrix(X, "X", allow_nan=True)
    y = check_vector(y, "y")
    n = check_consistent_length(X, y, names=("X", "y"))
    w = check_sample_weight(weights, n)
    p = X.shape[1]
    eff_mtry = mtry if mtry is not None else max(1, p // 3)
    if not 1 <= eff_mtry <= p:
        raise ValueError(f"mtry must be in [1, {p}]")
    trees = tuple(
        _fit_forest_member(
            X,
            y,
            w,
            t,
            seed,
            mtry=eff_mtry,
            min_node_size=min_node_size,
            max_depth=max_depth,
            cp=cp,
            bootstrap=bootstrap,
        )
        for t in range(n_trees)
    )
    return Forest(trees=trees, n_trees=n_trees, mtry=eff_mtry, bootstrap=bootstrap, seed=seed)


def predict_forest(forest: Forest, X) -> np.ndarray:
    """Arithmetic mean of member predictions."""
    member = np.stack([predict_tree(t, X) for t in forest.trees])
    return member.mean(axis=0)


class CartRegressor(RegressorMixin, BaseEstimator):
    """Constant-leaf regression tree with exhaustive SSE-reduction splits."""

    def __init__(self, min_node_size=20, max_depth=10, cp=0.001, mtry=None, random_state=None):
        self.min_node_size = min_node_size
        self.max_depth = max_depth
        self.cp = cp
        self.mtry = mtry
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        X = check_matrix(X, "X", allow_nan=True)
        y = check_vector(y, "y")
        check_consistent_length(X, y, names=("X", "y"))
        self.tree_ = fit_cart(
            X,
            y,
            weights=sample_weight,
            min_node_size=self.min_node_size,
            max_depth=self.max_depth,
            cp=self.cp,
            mtry=self.mtry,
            rng=check_rng(self.random_state) if self.mtry is not None else None,
        )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        return predict_tree(self.tree_, X)


class ForestRegressor(RegressorMixin, BaseEstimator):
    """Bagged forest of regression trees with per-split feature sampling."""

    def __init__(
        self,
        n_trees=100,
        mtry=None,
        min_node_size=20,
        max_depth=10,
        cp=0.001,
        bootstrap=True,
        random_state=0,
    ):
        self.n_trees = n_trees
        self.mtry = mtry
        self.min_node_size = min_node_size
        self.max_depth = max_depth
        self.cp = cp
        self.bootstrap = bootstrap
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        self.forest_ = fit_forest(
            X,
            y,
            weights=sample_weight,
            n_trees=self.n_trees,
            mtry=self.mtry,
            min_node_size=self.min_node_size,
            max_depth=self.max_depth,
            cp=self.cp,
            bootstrap=self.bootstrap,
            seed=int(self.random_state or 0),
        )
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def predict(self, X):
        return predict_forest(self.forest_, X)

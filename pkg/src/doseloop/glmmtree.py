"""Mixed-effects model trees: partitioning trees with linear dose models in
the leaves, estimated jointly with per-patient random intercepts.

Estimation alternates between (a) growing a model-based tree on the
intercept-adjusted response and (b) refitting the random-intercept mixed
model whose fixed effects are the leaf-indicator interactions, until the
tree structure repeats or max_iter is hit. After the loop every leaf model
is refreshed by weighted least squares on the final adjusted response, so
the leaf models are exactly the WLS solutions within their leaves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .dataset import Dataset
from .lmm import fit_lmm
from .rules import RuleSet, extract_rules
from .tree import (
    _fit_leaf_model,
    apply_tree,
    grow_tree,
    iter_leaves,
    predict_tree,
    tree_signature,
)
from .validation import (
    check_consistent_length,
    check_matrix,
    check_sample_weight,
    check_vector,
)

__all__ = [
    "GlmmTreeRegressor",
    "BaggedGlmmTreeRegressor",
    "DoseResponsePoint",
    "fit_glmm_tree",
    "predict_glmm_tree",
    "fit_bagged_glmm_tree",
    "dose_response",
]

_SEED_MASK = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class DoseResponsePoint:
    dose: float
    delta_hb: float
    projected_hb: float

    def to_json_dict(self) -> dict:
        return {
            "dose": float(self.dose),
            "delta_hb": float(self.delta_hb),
            "projected_hb": float(self.projected_hb),
        }


def _resolve_columns(feature_names, regressors, partitioners):
    names = tuple(feature_names)
    index = {f: j for j, f in enumerate(names)}

    def to_idx(items, what):
        out = []
        for it in items:
            if isinstance(it, (int, np.integer)):
                out.append(int(it))
            elif it in index:
                out.append(index[it])
            else:
                raise ValueError(f"unknown {what} {it!r} (features: {names})")
        return tuple(out)

    reg_idx = to_idx(regressors, "regressor")
    if partitioners is None:
        part_idx = tuple(j for j in range(len(names)) if j not in set(reg_idx))
    else:
        part_idx = to_idx(partitioners, "partitioner")
    if set(reg_idx) & set(part_idx):
        raise ValueError("regressors and partitioners must be disjoint")
    if not part_idx:
        raise ValueError("at least one partitioning feature is required")
    return names, reg_idx, part_idx


class GlmmTreeRegressor(RegressorMixin, BaseEstimator):
    """Model tree with a linear dose model per leaf and patient intercepts.

    regressors/partitioners may be feature names (resolved against
    feature_names passed to fit) or column indices. partitioners=None uses
    every non-regressor column. Splits are accepted by an F-test at level
    alpha_split, Bonferroni-corrected for the number of candidate splits
    examined at the node.
    """

    def __init__(
        self,
        regressors=("EPO_DOSE",),
        partitioners=None,
        min_node_size: int = 20,
        max_depth: int = 10,
        alpha_split: float = 0.05,
        max_iter: int = 10,
        criterion: str = "REML",
        random_state=None,
    ):
        self.regressors = regressors
        self.partitioners = partitioners
        self.min_node_size = min_node_size
        self.max_depth = max_depth
        self.alpha_split = alpha_split
        self.max_iter = max_iter
        self.criterion = criterion
        self.random_state = random_state

    # -- fitting ----------------------------------------------------------
    def fit(self, X, y, *, clusters, feature_names=None, sample_weight=None, initial_intercepts=None):
        X = check_matrix(X, "X", allow_nan=True)
        y = check_vector(y, "y")
        clusters = np.asarray(clusters, dtype=object).ravel()
        n = check_consistent_length(X, y, clusters, names=("X", "y", "clusters"))
        w = check_sample_weight(sample_weight, n)
        if feature_names is None:
            feature_names = tuple(f"x{j}" for j in range(X.shape[1]))
        names, reg_idx, part_idx = _resolve_columns(feature_names, self.regressors, self.partitioners)
        if len(names) != X.shape[1]:
            raise ValueError(f"feature_names has {len(names)} entries for {X.shape[1]} columns")
        Z = X[:, part_idx]
        R = X[:, reg_idx]
        if np.isnan(R).any():
            raise ValueError("regressor columns must not contain missing values")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

        labels, ci = np.unique(clusters, return_inverse=True)
        g = len(labels)
        b = np.zeros(g)
        if initial_intercepts:
            b = np.array([float(initial_intercepts.get(lab, 0.0)) for lab in labels])

        r = len(reg_idx)
        trace = []
        converged = False
        prev_sig = None
        tree = None
        lmm_fit = None
        for _ in range(self.max_iter):
            y_star = y - b[ci]
            tree = grow_tree(
                Z,
                y_star,
                weights=w,
                X_reg=R,
                min_node_size=self.min_node_size,
                max_depth=self.max_depth,
                stopping="ftest",
                alpha_split=self.alpha_split,
            )
            sig = tree_signature(tree)
            leaf_of = apply_tree(tree, Z)
            L = tree.n_leaves()
            D = np.zeros((n, L * (1 + r)))
            for leaf in range(L):
                rows = leaf_of == leaf
                D[rows, leaf * (1 + r)] = 1.0
                if r:
                    D[np.ix_(rows, range(leaf * (1 + r) + 1, (leaf + 1) * (1 + r)))] = R[rows]
            lmm_fit = fit_lmm(
                D,
                y,
                clusters,
                weights=w,
                criterion=self.criterion,
                allow_singular=True,
            )
            b = np.array([lmm_fit.b_hat[lab] for lab in labels])
            trace.append((sig, lmm_fit.loglik))
            if sig == prev_sig:
                converged = True
                break
            prev_sig = sig

        # Refresh leaf models on the final adjusted response so each leaf
        # model equals the WLS solution within its leaf.
        y_star = y - b[ci]
        leaf_of = apply_tree(tree, Z)
        for li, (leaf, _) in enumerate(iter_leaves(tree)):
            rows = leaf_of == li
            model, value, sse = _fit_leaf_model(y_star[rows], w[rows], R[rows])
            leaf.model = model
            leaf.value = value
            leaf.sse = sse
            leaf.n_samples = int(rows.sum())

        flags = tuple(lmm_fit.flags)
        logliks = [ll for _, ll in trace]
        if any(b2 < a2 - 1e-6 for a2, b2 in zip(logliks, logliks[1:])):
            flags = flags + ("nonmonotone_loglik",)

        self.feature_names_ = names
        self.regressor_idx_ = reg_idx
        self.partitioner_idx_ = part_idx
        self.regressors_ = tuple(names[j] for j in reg_idx)
        self.partitioners_ = tuple(names[j] for j in part_idx)
        self.tree_ = tree
        self.b_hat_ = dict(lmm_fit.b_hat)
        self.sigma2_ = lmm_fit.sigma2
        self.sigma_b2_ = lmm_fit.sigma_b2
        self.theta_ = lmm_fit.theta
        self.loglik_ = lmm_fit.loglik
        self.criterion_ = self.criterion
        self.trace_ = tuple(trace)
        self.converged_ = converged
        self.n_iter_ = len(trace)
        self.flags_ = flags
        self.n_features_in_ = X.shape[1]
        return self

    # -- prediction ---------------------------------------------------------
    def predict(self, X, clusters=None, mode: str = "marginal") -> np.ndarray:
        if mode not in ("marginal", "conditional"):
            raise ValueError(f"mode must be 'marginal' or 'conditional', got {mode!r}")
        X = check_matrix(X, "X", allow_nan=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        pred = predict_tree(self.tree_, X[:, self.partitioner_idx_], X[:, self.regressor_idx_])
        if mode == "conditional" and clusters is not None:
            clusters = np.asarray(clusters, dtype=object).ravel()
            check_consistent_length(X, clusters, names=("X", "clusters"))
            pred = pred + np.array([self.b_hat_.get(c, 0.0) for c in clusters])
        return pred

    def rule_set(self, version: int = 0) -> RuleSet:
        """The tree as IF-THEN rules over partitioner names."""
        part_names = tuple(self.feature_names_[j] for j in self.partitioner_idx_)
        return extract_rules(self.tree_, part_names, regressors=self.regressors_, version=version)

    def dose_response(
        self,
        features,
        current_hb: float,
        dose_grid,
        cluster=None,
        mode: str = "conditional",
    ):
        """What-if predictions over a dose grid for one visit row.

        features is a mapping or vector over feature_names_; the first
        regressor is the dose that gets substituted. Returns a list of
        DoseResponsePoint(dose, delta_hb, projected_hb = current_hb + delta).
        """
        dose_grid = [float(v) for v in dose_grid]
        if not dose_grid:
            raise ValueError("dose_grid must be non-empty")
        if not all(np.isfinite(dose_grid)):
            raise ValueError("dose_grid must be finite")
        if isinstance(features, dict):
            row = np.array([features.get(f, np.nan) for f in self.feature_names_], dtype=float)
        else:
            row = np.asarray(features, dtype=float).ravel()
            if len(row) != self.n_features_in_:
                raise ValueError(f"features has {len(row)} values, expected {self.n_features_in_}")
        dose_col = self.regressor_idx_[0]
        rows = np.tile(row, (len(dose_grid), 1))
        rows[:, dose_col] = dose_grid
        clusters = None if cluster is None else [cluster] * len(dose_grid)
        delta = self.predict(rows, clusters=clusters, mode=mode)
        return [
            DoseResponsePoint(dose=d, delta_hb=float(dh), projected_hb=float(current_hb + dh))
            for d, dh in zip(dose_grid, delta)
        ]


def _bagged_member(X, y, clusters, w, labels, tree_index, seed, est_params, feature_names, bootstrap):
    """Fit one cluster-bootstrap member; pure in (data, tree_index, seed)."""
    member_seed = (int(seed) ^ int(tree_index)) & _SEED_MASK
    if bootstrap:
        rng = np.random.default_rng(member_seed)
        g = len(labels)
        draws = rng.integers(0, g, size=g)
        row_of = {lab: np.flatnonzero(clusters == lab) for lab in labels}
        idx_parts, lab_parts = [], []
        for j, di in enumerate(draws):
            lab = labels[di]
            rows = row_of[lab]
            idx_parts.append(rows)
            lab_parts.extend([f"{lab}#{j}"] * len(rows))
        idx = np.concatenate(idx_parts)
        Xb, yb, wb = X[idx], y[idx], w[idx]
        cb = np.asarray(lab_parts, dtype=object)
    else:
        Xb, yb, wb, cb = X, y, w, clusters
    member = GlmmTreeRegressor(**est_params).fit(
        Xb, yb, clusters=cb, feature_names=feature_names, sample_weight=wb
    )
    # Average the copies' intercepts back onto the original patient ids.
    if bootstrap:
        sums: dict = {}
        counts: dict = {}
        for key, val in member.b_hat_.items():
            orig = key.rsplit("#", 1)[0]
            sums[orig] = sums.get(orig, 0.0) + val
            counts[orig] = counts.get(orig, 0) + 1
        b_map = {k: sums[k] / counts[k] for k in sums}
    else:
        b_map = dict(member.b_hat_)
    return member, b_map


class BaggedGlmmTreeRegressor(RegressorMixin, BaseEstimator):
    """Cluster-bootstrap bagging of mixed-effects model trees.

    Patients (clusters) are resampled with replacement and each drawn copy
    is treated as a distinct cluster; a patient's intercept in a member is
    the mean over that member's copies. Member seeds are seed XOR index.
    With n_trees=1 and bootstrap=False this is exactly the single tree.
    """

    def __init__(
        self,
        n_trees: int = 100,
        bootstrap: bool = True,
        regressors=("EPO_DOSE",),
        partitioners=None,
        min_node_size: int = 20,
        max_depth: int = 10,
        alpha_split: float = 0.05,
        max_iter: int = 10,
        criterion: str = "REML",
        random_state=0,
    ):
        self.n_trees = n_trees
        self.bootstrap = bootstrap
        self.regressors = regressors
        self.partitioners = partitioners
        self.min_node_size = min_node_size
        self.max_depth = max_depth
        self.alpha_split = alpha_split
        self.max_iter = max_iter
        self.criterion = criterion
        self.random_state = random_state

    def fit(self, X, y, *, clusters, feature_names=None, sample_weight=None):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        X = check_matrix(X, "X", allow_nan=True)
        y = check_vector(y, "y")
        clusters = np.asarray(clusters, dtype=object).ravel()
        n = check_consistent_length(X, y, clusters, names=("X", "y", "clusters"))
        w = check_sample_weight(sample_weight, n)
        if feature_names is None:
            feature_names = tuple(f"x{j}" for j in range(X.shape[1]))
        labels = np.unique(clusters)
        est_params = dict(
            regressors=self.regressors,
            partitioners=self.partitioners,
            min_node_size=self.min_node_size,
            max_depth=self.max_depth,
            alpha_split=self.alpha_split,
            max_iter=self.max_iter,
            criterion=self.criterion,
        )
        members, maps = [], []
        for t in range(self.n_trees):
            member, b_map = _bagged_member(
                X,
                y,
                clusters,
                w,
                labels,
                t,
                int(self.random_state or 0),
                est_params,
                tuple(feature_names),
                self.bootstrap,
            )
            members.append(member)
            maps.append(b_map)
        self.members_ = tuple(members)
        self.member_b_ = tuple(maps)
        self.feature_names_ = tuple(feature_names)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, clusters=None, mode: str = "marginal") -> np.ndarray:
        preds = []
        for member, b_map in zip(self.members_, self.member_b_):
            p = member.predict(X, mode="marginal")
            if mode == "conditional" and clusters is not None:
                cl = np.asarray(clusters, dtype=object).ravel()
                p = p + np.array([b_map.get(c, 0.0) for c in cl])
            preds.append(p)
        return np.stack(preds).mean(axis=0)

    def dose_response(self, features, current_hb, dose_grid, cluster=None, mode="conditional"):
        dose_grid = [float(v) for v in dose_grid]
        if isinstance(features, dict):
            row = np.array([features.get(f, np.nan) for f in self.feature_names_], dtype=float)
        else:
            row = np.asarray(features, dtype=float).ravel()
        dose_col = self.members_[0].regressor_idx_[0]
        rows = np.tile(row, (len(dose_grid), 1))
        rows[:, dose_col] = dose_grid
        clusters = None if cluster is None else [cluster] * len(dose_grid)
        delta = self.predict(rows, clusters=clusters, mode=mode)
        return [
            DoseResponsePoint(dose=d, delta_hb=float(dh), projected_hb=float(current_hb + dh))
            for d, dh in zip(dose_grid, delta)
        ]


# -- Dataset-level wrappers ---------------------------------------------------


def fit_glmm_tree(d: Dataset, regressors=("EPO_DOSE",), partitioners=None, **params) -> GlmmTreeRegressor:
    """Fit on a Dataset: target column is the response, patients cluster."""
    mask = ~np.isnan(d.target)
    est = GlmmTreeRegressor(regressors=regressors, partitioners=partitioners, **params)
    return est.fit(
        d.X[mask],
        d.target[mask],
        clusters=d.patient_ids[mask],
        feature_names=d.schema,
        sample_weight=d.weights[mask],
    )


def predict_glmm_tree(fit, X, clusters=None, mode: str = "marginal") -> np.ndarray:
    return fit.predict(X, clusters=clusters, mode=mode)


def fit_bagged_glmm_tree(
    d: Dataset, n_trees: int = 100, bootstrap: bool = True, regressors=("EPO_DOSE",), **params
) -> BaggedGlmmTreeRegressor:
    mask = ~np.isnan(d.target)
    est = BaggedGlmmTreeRegressor(n_trees=n_trees, bootstrap=bootstrap, regressors=regressors, **params)
    return est.fit(
        d.X[mask],
        d.target[mask],
        clusters=d.patient_ids[mask],
        feature_names=d.schema,
        sample_weight=d.weights[mask],
    )


def dose_response(fit, features, current_hb, dose_grid, cluster=None, mode="conditional"):
    return fit.dose_response(features, current_hb, dose_grid, cluster=cluster, mode=mode)

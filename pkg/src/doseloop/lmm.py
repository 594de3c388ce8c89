"""Random-intercept linear mixed-effects models.

The covariance of a cluster's observations is sigma2 * (W^-1 + theta * 11'),
with W the diagonal of per-row weights and theta = sigma_b^2 / sigma^2. For
this structure the likelihood profiles down to one dimension: beta and
sigma2 have closed forms given theta, and each cluster's inverse comes from
a rank-one Sherman-Morrison update, so a fit is a 1-d search over log theta
(coarse half-decade grid, then bounded Brent refinement).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .validation import check_consistent_length, check_matrix, check_sample_weight, check_vector

__all__ = [
    "LmmFit",
    "LmmRankError",
    "fit_lmm",
    "predict_lmm",
    "profiled_loglik",
    "forward_select",
    "ForwardSelectResult",
    "THETA_MIN",
    "THETA_MAX",
]

THETA_MIN = 1e-8
THETA_MAX = 1e8
_LOG_THETA_TOL = 1e-8


class LmmRankError(ValueError):
    """Design matrix is rank deficient."""


@dataclass(frozen=True)
class LmmFit:
    """Fitted random-intercept model."""

    beta: np.ndarray
    sigma2: float
    sigma_b2: float
    theta: float
    b_hat: dict
    loglik: float
    criterion: str
    feature_names: tuple
    n_obs: int
    n_clusters: int
    flags: tuple = ()

    @property
    def boundary(self) -> bool:
        return "theta_lower_bound" in self.flags or "single_cluster" in self.flags


class _Profile:
    """Per-theta closed-form quantities for fixed (X, y, clusters, w)."""

    def __init__(self, X, y, cluster_codes, n_clusters, w, *, allow_singular):
        self.X = X
        self.y = y
        self.ci = cluster_codes
        self.g = n_clusters
        self.w = w
        self.n, self.p = X.shape
        self.allow_singular = allow_singular

        Xw = X * w[:, None]
        self.XtWX = Xw.T @ X
        self.XtWy = Xw.T @ y
        self.yWy = float(w @ (y * y))
        self.S = np.bincount(cluster_codes, weights=w, minlength=n_clusters)
        self.SX = np.zeros((n_clusters, self.p))
        np.add.at(self.SX, cluster_codes, Xw)
        self.Sy = np.bincount(cluster_codes, weights=w * y, minlength=n_clusters)
        self.sum_log_w = float(np.log(w).sum())

    def solve(self, theta: float):
        """GLS pieces at a given variance ratio. Returns a dict of parts."""
        c = theta / (1.0 + theta * self.S)
        A = self.XtWX - (self.SX * c[:, None]).T @ self.SX
        bvec = self.XtWy - self.SX.T @ (c * self.Sy)
        if self.allow_singular:
            eigvals, eigvecs = np.linalg.eigh(A)
            tol = max(abs(eigvals).max(), 1.0) * 1e-12
            keep = eigvals > tol
            rank = int(keep.sum())
            inv_vals = np.where(keep, 1.0 / np.where(keep, eigvals, 1.0), 0.0)
            beta = eigvecs @ (inv_vals * (eigvecs.T @ bvec))
            logdet_A = float(np.log(eigvals[keep]).sum())
        else:
            beta = np.linalg.solve(A, bvec)
            rank = self.p
            sign, logdet_A = np.linalg.slogdet(A)
            logdet_A = float(logdet_A)
        yVy = self.yWy - float(c @ (self.Sy * self.Sy))
        Q = max(yVy - float(beta @ bvec), 0.0)
        logdet_V = float(np.log1p(theta * self.S).sum()) - self.sum_log_w
        return {"beta": beta, "Q": Q, "logdet_V": logdet_V, "logdet_A": logdet_A, "rank": rank}

    def loglik(self, theta: float, criterion: str) -> float:
        parts = self.solve(theta)
        n = self.n
        if criterion == "ML":
            sigma2 = parts["Q"] / n
            if sigma2 <= 0.0:
                return -np.inf
            return -0.5 * (n * math.log(2.0 * math.pi * sigma2) + parts["logdet_V"] + n)
        dof = n - parts["rank"]
        sigma2 = parts["Q"] / dof
        if sigma2 <= 0.0:
            return -np.inf
        return -0.5 * (
            dof * math.log(2.0 * math.pi * sigma2)
            + parts["logdet_V"]
            + parts["logdet_A"]
            + dof
        )


def _prepare(X, y, clusters, weights):
    X = check_matrix(X, "X")
    y = check_vector(y, "y")
    clusters = np.asarray(clusters, dtype=object).ravel()
    n = check_consistent_length(X, y, clusters, names=("X", "y", "clusters"))
    w = check_sample_weight(weights, n)
    # Zero-weight rows carry no information and would blow up log det W^-1.
    keep = w > 0
    if not keep.all():
        X, y, clusters, w = X[keep], y[keep], clusters[keep], w[keep]
        n = len(y)
    labels, ci = np.unique(clusters, return_inverse=True)
    return X, y, labels, ci, w, n


def fit_lmm(
    X,
    y,
    clusters,
    weights=None,
    criterion: str = "REML",
    *,
    feature_names=None,
    allow_singular: bool = False,
) -> LmmFit:
    """Fit a random-intercept model by profiled (restricted) likelihood.

    theta is maximized over [1e-8, 1e8] with a half-decade grid prescan
    followed by bounded Brent refinement (absolute tolerance 1e-8 on log
    theta), so the fitted log-likelihood dominates every grid value. A
    theta pinned at the lower bound is truncated to sigma_b2 = 0 and
    flagged; fewer than 2 clusters also yields sigma_b2 = 0 with a flag.
    """
    if criterion not in ("ML", "REML"):
        raise ValueError(f"criterion must be 'ML' or 'REML', got {criterion!r}")
    X, y, labels, ci, w, n = _prepare(X, y, clusters, weights)
    p = X.shape[1]
    if n < p + 1:
        raise ValueError(f"need at least {p + 1} positive-weight rows, got {n}")
    if not allow_singular:
        if np.linalg.matrix_rank(X * np.sqrt(w)[:, None]) < p:
            raise LmmRankError("design matrix is rank deficient")
    g = len(labels)
    prof = _Profile(X, y, ci, g, w, allow_singular=allow_singular)

    flags: list = []
    if g < 2:
        theta = 0.0
        flags.append("single_cluster")
    else:
        lo, hi = math.log(THETA_MIN), math.log(THETA_MAX)
        grid = np.log(10.0) * np.arange(-8.0, 8.0 + 0.25, 0.5)
        vals = np.array([prof.loglik(math.exp(t), criterion) for t in grid])
        i0 = int(np.argmax(vals))
        t0 = float(grid[i0])
        half = 0.5 * math.log(10.0)
        res = minimize_scalar(
            lambda t: -prof.loglik(math.exp(t), criterion),
            bounds=(max(lo, t0 - half), min(hi, t0 + half)),
            method="bounded",
            options={"xatol": _LOG_THETA_TOL},
        )
        t_hat = float(res.x) if -res.fun >= vals[i0] else t0
        theta = math.exp(t_hat)
        if theta <= THETA_MIN * 1.5:
            theta = 0.0
            flags.append("theta_lower_bound")
        elif theta >= THETA_MAX / 1.5:
            flags.append("theta_upper_bound")

    parts = prof.solve(theta)
    dof = n if criterion == "ML" else n - parts["rank"]
    sigma2 = parts["Q"] / dof
    sigma_b2 = theta * sigma2
    loglik = prof.loglik(theta, criterion)

    resid = y - X @ parts["beta"]
    Sr = np.bincount(ci, weights=w * resid, minlength=g)
    shrink = theta * Sr / (1.0 + theta * prof.S)
    b_hat = {label: float(b) for label, b in zip(labels, shrink)}

    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(p))
    return LmmFit(
        beta=parts["beta"],
        sigma2=float(sigma2),
        sigma_b2=float(sigma_b2),
        theta=float(theta),
        b_hat=b_hat,
        loglik=float(loglik),
        criterion=criterion,
        feature_names=names,
        n_obs=n,
        n_clusters=g,
        flags=tuple(flags),
    )


def profiled_loglik(X, y, clusters, theta: float, weights=None, criterion: str = "REML") -> float:
    """Profiled (restricted) log-likelihood at a caller-supplied theta."""
    X, y, labels, ci, w, n = _prepare(X, y, clusters, weights)
    prof = _Profile(X, y, ci, len(labels), w, allow_singular=True)
    return prof.loglik(theta, criterion)


def predict_lmm(fit: LmmFit, X, clusters=None, mode: str = "conditional") -> np.ndarray:
    """Xbeta plus, in conditional mode, the BLUP of each known cluster."""
    if mode not in ("conditional", "marginal"):
        raise ValueError(f"mode must be 'conditional' or 'marginal', got {mode!r}")
    X = check_matrix(X, "X")
    if X.shape[1] != len(fit.beta):
        raise ValueError(
            f"X has {X.shape[1]} columns, fit expects {len(fit.beta)} ({fit.feature_names})"
        )
    pred = X @ fit.beta
    if mode == "marginal" or clusters is None:
        return pred
    clusters = np.asarray(clusters, dtype=object).ravel()
    check_consistent_length(X, clusters, names=("X", "clusters"))
    offsets = np.array([fit.b_hat.get(c, 0.0) for c in clusters])
    return pred + offsets


@dataclass(frozen=True)
class ForwardSelectResult:
    selected: tuple
    fit: LmmFit
    bic: float
    trace: tuple = ()


def _bic(fit_ml: LmmFit, k: int) -> float:
    return -2.0 * fit_ml.loglik + k * math.log(fit_ml.n_obs)


def forward_select(
    X,
    y,
    clusters,
    weights=None,
    criterion: str = "REML",
    feature_names=None,
) -> ForwardSelectResult:
    """Greedy forward-stepwise selection by BIC over candidate columns of X.

    An intercept is always included. Selection compares ML log-likelihoods
    (REML values are not comparable across fixed-effect sets); the returned
    fit is refit on the chosen subset under the caller's criterion. The BIC
    parameter count is the number of betas plus the two variances.
    """
    X = check_matrix(X, "X")
    n, p = X.shape
    if p == 0:
        raise ValueError("forward_select needs at least one candidate feature")
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise ValueError("feature_names length does not match X")

    def design(subset):
        cols = [np.ones(n)] + [X[:, j] for j in subset]
        return np.column_stack(cols)

    selected: list = []
    current = fit_lmm(design(selected), y, clusters, weights, "ML")
    current_bic = _bic(current, 1 + 2)
    trace = [((), current_bic)]
    improved = True
    while improved and len(selected) < p:
        improved = False
        best_j, best_bic, best_fit = None, current_bic, None
        for j in range(p):
            if j in selected:
                continue
            try:
                cand = fit_lmm(design(selected + [j]), y, clusters, weights, "ML")
            except LmmRankError:
                continue
            bic = _bic(cand, len(selected) + 2 + 2)
            if bic < best_bic - 1e-10:
                best_j, best_bic, best_fit = j, bic, cand
        if best_j is not None:
            selected.append(best_j)
            current, current_bic = best_fit, best_bic
            trace.append((tuple(names[j] for j in selected), current_bic))
            improved = True

    final = fit_lmm(
        design(selected),
        y,
        clusters,
        weights,
        criterion,
        feature_names=("intercept",) + tuple(names[j] for j in selected),
    )
    return ForwardSelectResult(
        selected=tuple(names[j] for j in selected),
        fit=final,
        bic=current_bic,
        trace=tuple(trace),
    )

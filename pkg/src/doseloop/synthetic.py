"""Synthetic longitudinal cohorts with planted rule structure.

Stands in for the (private) registry data: covariates are uniform within
per-feature ranges, each visit's mean response comes from the single
planted rule its covariates satisfy, patients share a random intercept,
and residual noise is Gaussian. Draw order is fixed (covariates, then
intercepts, then noise) so two truths that differ only in their rule
models generate pointwise-comparable datasets from the same seed.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset
from .rules import Condition, Rule, RuleSet, encode
from .tree import NodeModel

__all__ = [
    "PartitionError",
    "SyntheticTruth",
    "generate_synthetic",
    "truth_value",
    "two_leaf_truth",
    "three_leaf_truth",
    "graded_truth",
    "misspecified_pair",
]


class PartitionError(ValueError):
    """Planted rules do not partition the covariate domain."""


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth for a synthetic cohort.

    ranges is the ordered feature domain, tuple of (name, (low, high)); the
    planted rules must partition it. sigma_b is the between-patient
    intercept SD, sigma the residual SD.
    """

    rules: RuleSet
    sigma_b: float
    sigma: float
    ranges: tuple
    n_clusters: int
    visits_per_cluster: int
    start_date: datetime.date = datetime.date(2020, 1, 1)
    visit_interval_days: int = 14
    target_name: str = "delta_Hb"

    def __post_init__(self):
        if self.sigma_b < 0:
            raise ValueError("sigma_b must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        object.__setattr__(
            self,
            "ranges",
            tuple((str(nm), (float(lo), float(hi))) for nm, (lo, hi) in self.ranges),
        )

    @property
    def schema(self) -> tuple:
        return tuple(nm for nm, _ in self.ranges)

    def to_json_dict(self) -> dict:
        return {
            "rules": self.rules.to_json_dict(),
            "sigma_b": self.sigma_b,
            "sigma": self.sigma,
            "ranges": [[nm, [lo, hi]] for nm, (lo, hi) in self.ranges],
            "n_clusters": self.n_clusters,
            "visits_per_cluster": self.visits_per_cluster,
            "start_date": self.start_date.isoformat(),
            "visit_interval_days": self.visit_interval_days,
            "target_name": self.target_name,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), ensure_ascii=False, indent=2)

    @classmethod
    def from_json_dict(cls, d: dict) -> "SyntheticTruth":
        return cls(
            rules=RuleSet.from_json_dict(d["rules"]),
            sigma_b=float(d["sigma_b"]),
            sigma=float(d["sigma"]),
            ranges=tuple((nm, (lo, hi)) for nm, (lo, hi) in d["ranges"]),
            n_clusters=int(d["n_clusters"]),
            visits_per_cluster=int(d["visits_per_cluster"]),
            start_date=datetime.date.fromisoformat(d["start_date"]),
            visit_interval_days=int(d["visit_interval_days"]),
            target_name=d.get("target_name", "delta_Hb"),
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticTruth":
        return cls.from_json_dict(json.loads(text))


def _rule_means(rules: RuleSet, X: np.ndarray, schema) -> np.ndarray:
    """Mean response per row under the planted partition; raises if some
    row matches zero or several rules."""
    M, _ = encode(rules, X, schema)
    sums = M.sum(axis=1)
    bad = np.flatnonzero(sums != 1)
    if bad.size:
        i = int(bad[0])
        raise PartitionError(
            f"planted rules are not a partition: row {i} matches {int(sums[i])} rules"
        )
    ridx = np.argmax(M, axis=1)
    col = {f: j for j, f in enumerate(schema)}
    reg_cols = [col[f] for f in rules.regressors]
    mu = np.empty(len(X))
    for i, rule in enumerate(rules.rules):
        mask = ridx == i
        if not mask.any():
            continue
        if reg_cols:
            mu[mask] = rule.model.predict(X[mask][:, reg_cols])
        else:
            mu[mask] = rule.model.beta0
    return mu


def truth_value(truth: SyntheticTruth, features) -> float:
    """Noise-free mean response at one covariate point (marginal over b)."""
    schema = truth.schema
    x = np.array([[features[f] for f in schema]], dtype=float)
    return float(_rule_means(truth.rules, x, schema)[0])


def generate_synthetic(truth: SyntheticTruth, seed: int):
    """Draw a cohort; deterministic in (truth, seed). Returns (Dataset, truth)."""
    rng = np.random.default_rng(seed)
    g, m = truth.n_clusters, truth.visits_per_cluster
    n = g * m
    schema = truth.schema
    lows = np.array([lo for _, (lo, _) in truth.ranges])
    highs = np.array([hi for _, (_, hi) in truth.ranges])

    # Draw order is load-bearing: rule models must not influence the draws.
    X = rng.uniform(lows, highs, size=(n, len(schema)))
    b = rng.normal(0.0, truth.sigma_b, size=g)
    eps = rng.normal(0.0, truth.sigma, size=n)

    mu = _rule_means(truth.rules, X, schema)
    cluster_of_row = np.repeat(np.arange(g), m)
    y = mu + b[cluster_of_row] + eps

    width = max(4, len(str(g - 1)))
    ids = [f"P{i:0{width}d}" for i in range(g) for _ in range(m)]
    dates = [
        truth.start_date + datetime.timedelta(days=truth.visit_interval_days * j)
        for _ in range(g)
        for j in range(m)
    ]
    d = Dataset(
        schema,
        ids,
        dates,
        X,
        y,
        target_name=truth.target_name,
    )
    return d, truth


# -- stock truths -----------------------------------------------------------


def _rule(rid: int, conds, beta0: float, beta1: float) -> Rule:
    return Rule(
        id=rid,
        conditions=tuple(Condition(f, op, t) for f, op, t in conds),
        model=NodeModel(beta0, (beta1,)),
        support=0,
        provenance="learned",
    )


_DEFAULT_RANGES = (
    ("z1", (-1.0, 1.0)),
    ("z2", (-1.0, 1.0)),
    ("z3", (-1.0, 1.0)),
    ("EPO_DOSE", (0.0, 8.0)),
)


def two_leaf_truth(
    sigma_b: float = 0.3,
    sigma: float = 0.2,
    n_clusters: int = 120,
    visits_per_cluster: int = 20,
) -> SyntheticTruth:
    """Two regimes split at z1 <= 0; models echo published rule magnitudes."""
    rules = RuleSet(
        rules=(
            _rule(1, [("z1", "le", 0.0)], -0.33, 0.226),
            _rule(2, [("z1", "gt", 0.0)], -0.46, 0.253),
        ),
        version=0,
        regressors=("EPO_DOSE",),
    )
    return SyntheticTruth(
        rules=rules,
        sigma_b=sigma_b,
        sigma=sigma,
        ranges=_DEFAULT_RANGES,
        n_clusters=n_clusters,
        visits_per_cluster=visits_per_cluster,
    )


def three_leaf_truth(
    sigma_b: float = 0.3,
    sigma: float = 0.2,
    n_clusters: int = 300,
    visits_per_cluster: int = 30,
) -> SyntheticTruth:
    """Three regimes: split on z1 at 0, then the right branch on z2 at 0.25.

    The two right-hand models sit at the same level at the mean dose but
    differ in intercept and slope; the left model sits well below both.
    That makes the z1 boundary carry most of the between-regime variance,
    so greedy SSE search finds the planted structure in the planted order.
    """
    rules = RuleSet(
        rules=(
            _rule(1, [("z1", "le", 0.0)], -0.33, 0.226),
            _rule(2, [("z1", "gt", 0.0), ("z2", "le", 0.25)], -0.46, 0.34),
            _rule(3, [("z1", "gt", 0.0), ("z2", "gt", 0.25)], -0.61, 0.38),
        ),
        version=0,
        regressors=("EPO_DOSE",),
    )
    return SyntheticTruth(
        rules=rules,
        sigma_b=sigma_b,
        sigma=sigma,
        ranges=_DEFAULT_RANGES,
        n_clusters=n_clusters,
        visits_per_cluster=visits_per_cluster,
    )


def graded_truth(
    n_slices: int = 24,
    sigma_b: float = 0.3,
    sigma: float = 0.2,
    n_clusters: int = 120,
    visits_per_cluster: int = 8,
) -> SyntheticTruth:
    """Fine monotone gradient: n_slices bands of z1 with slowly drifting
    (intercept, slope), intercepts -0.1 to -0.9 and slopes 0.15 to 0.5.

    No small tree matches this truth exactly, so fitted trees staircase it
    and their split placement varies from sample to sample; that makes it
    the natural benchmark for ensemble averaging over single trees."""
    if n_slices < 2:
        raise ValueError("n_slices must be >= 2")
    edges = np.linspace(-1.0, 1.0, n_slices + 1)
    rules = []
    for k in range(n_slices):
        conds = []
        if k > 0:
            conds.append(("z1", "gt", float(edges[k])))
        if k < n_slices - 1:
            conds.append(("z1", "le", float(edges[k + 1])))
        frac = k / (n_slices - 1)
        rules.append(_rule(k + 1, conds, -0.1 - 0.8 * frac, 0.15 + 0.35 * frac))
    return SyntheticTruth(
        rules=RuleSet(rules=tuple(rules), version=0, regressors=("EPO_DOSE",)),
        sigma_b=sigma_b,
        sigma=sigma,
        ranges=_DEFAULT_RANGES,
        n_clusters=n_clusters,
        visits_per_cluster=visits_per_cluster,
    )


def misspecified_pair(
    sigma_b: float = 0.3,
    sigma: float = 0.2,
    n_clusters: int = 120,
    visits_per_cluster: int = 20,
):
    """(corrupted, clean) truth pair sharing covariate structure.

    The corrupted truth shifts both leaf models away from the clean one by
    a constant offset in (beta0, beta1); training on the corrupted cohort
    and testing on the clean one yields the misspecified-start setting for
    closed-loop runs."""
    clean = two_leaf_truth(
        sigma_b=sigma_b,
        sigma=sigma,
        n_clusters=n_clusters,
        visits_per_cluster=visits_per_cluster,
    )
    corrupt_rules = RuleSet(
        rules=(
            replace(clean.rules.rules[0], model=NodeModel(-0.33 + 0.5, (0.226 + 0.2,))),
            replace(clean.rules.rules[1], model=NodeModel(-0.46 + 0.6, (0.253 + 0.2,))),
        ),
        version=0,
        regressors=clean.rules.regressors,
    )
    corrupt = replace(clean, rules=corrupt_rules)
    return corrupt, clean

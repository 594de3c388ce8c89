"""Inter-rater reliability: Krippendorff's alpha for interval ratings,
a unit-resampling bootstrap confidence interval, and the gate that must
pass before expert advice is merged into training data.

alpha = 1 - D_o / D_e with squared-difference distance. Observed
disagreement averages within-unit pairwise squared differences over units
with at least two ratings; expected disagreement pools exactly those
pairable values. Units with a single rating contribute to neither term.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AgreementError",
    "RatingsMatrix",
    "AlphaResult",
    "AgreementResult",
    "GateResult",
    "krippendorff_alpha",
    "intra_rater_alpha",
    "bootstrap_ci",
    "agreement_result",
    "reliability_gate",
    "load_ratings_csv",
    "DEFAULT_GATE_THRESHOLD",
]

DEFAULT_GATE_THRESHOLD = 0.667


class AgreementError(ValueError):
    pass


@dataclass(frozen=True)
class RatingsMatrix:
    """Units x raters grid of interval ratings; NaN marks a missing cell."""

    values: np.ndarray
    unit_ids: tuple
    rater_ids: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise AgreementError("ratings must be a 2-d units x raters grid")
        if np.isinf(v).any():
            raise AgreementError("ratings must be finite where present")
        if v.shape != (len(self.unit_ids), len(self.rater_ids)):
            raise AgreementError(
                f"values shape {v.shape} != ({len(self.unit_ids)}, {len(self.rater_ids)})"
            )
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "rater_ids", tuple(self.rater_ids))

    @property
    def n_units(self) -> int:
        return self.values.shape[0]

    @property
    def n_raters(self) -> int:
        return self.values.shape[1]

    def pairable_units(self) -> np.ndarray:
        return np.sum(~np.isnan(self.values), axis=1) >= 2

    @classmethod
    def from_long(cls, triples) -> "RatingsMatrix":
        """Build from (unit_id, rater_id, value) triples."""
        units: dict = {}
        raters: dict = {}
        cells = []
        for unit, rater, value in triples:
            units.setdefault(str(unit), len(units))
            raters.setdefault(str(rater), len(raters))
            cells.append((str(unit), str(rater), float(value)))
        values = np.full((len(units), len(raters)), np.nan)
        for unit, rater, value in cells:
            i, j = units[unit], raters[rater]
            if not math.isnan(values[i, j]):
                raise AgreementError(f"duplicate rating for unit {unit!r} by rater {rater!r}")
            values[i, j] = value
        return cls(values=values, unit_ids=tuple(units), rater_ids=tuple(raters))


@dataclass(frozen=True)
class AlphaResult:
    alpha: float
    d_o: float
    d_e: float
    n_pairable: int
    degenerate: bool = False


def _alpha_parts(values: np.ndarray):
    """(D_o numerator pieces, pooled sums) over pairable units."""
    present = ~np.isnan(values)
    m_u = present.sum(axis=1)
    keep = m_u >= 2
    if not np.any(keep):
        return None
    v = np.where(present, values, 0.0)
    s1 = v.sum(axis=1)[keep]
    s2 = (v * v).sum(axis=1)[keep]
    m = m_u[keep].astype(np.float64)
    # Within a unit sum_{j != j'} (v_j - v_j')^2 = 2 (m * sum v^2 - (sum v)^2).
    unit_terms = 2.0 * (m * s2 - s1 * s1) / (m - 1.0)
    n_pair = float(m.sum())
    pooled_s1 = float(s1.sum())
    pooled_s2 = float(s2.sum())
    return unit_terms, n_pair, pooled_s1, pooled_s2


def krippendorff_alpha(m: RatingsMatrix) -> AlphaResult:
    """Interval-scale alpha. All pooled values identical (D_e = 0) returns
    the degenerate convention alpha = 1 with a flag."""
    parts = _alpha_parts(m.values)
    if parts is None:
        raise AgreementError("alpha needs at least one unit with two ratings")
    unit_terms, n_pair, s1, s2 = parts
    d_o = float(unit_terms.sum()) / n_pair
    d_e_num = 2.0 * (n_pair * s2 - s1 * s1)
    d_e = d_e_num / (n_pair * (n_pair - 1.0))
    if d_e <= 0.0 or d_e_num <= 1e-12 * max(n_pair * s2, 1.0):
        return AlphaResult(alpha=1.0, d_o=d_o, d_e=0.0, n_pairable=int(n_pair), degenerate=True)
    return AlphaResult(
        alpha=1.0 - d_o / d_e,
        d_o=d_o,
        d_e=d_e,
        n_pairable=int(n_pair),
        degenerate=False,
    )


def intra_rater_alpha(m: RatingsMatrix) -> AlphaResult:
    """Test-retest agreement: same computation over a units x occasions
    matrix for a single rater."""
    return krippendorff_alpha(m)


def bootstrap_ci(m: RatingsMatrix, B: int = 1000, level: float = 0.95, seed: int = 0):
    """Percentile interval from unit resampling; replicate b draws its own
    generator from (seed, b), so the result is independent of evaluation
    order. A degenerate point estimate short-circuits to (1, 1)."""
    if B < 100:
        raise AgreementError("bootstrap needs B >= 100 replicates")
    if not 0.0 < level < 1.0:
        raise AgreementError("level must be in (0, 1)")
    point = krippendorff_alpha(m)
    if point.degenerate:
        return (1.0, 1.0)
    n = m.n_units
    alphas = np.empty(B)
    for b in range(B):
        rng = np.random.default_rng((int(seed), b))
        idx = rng.integers(0, n, size=n)
        sub = m.values[idx]
        parts = _alpha_parts(sub)
        if parts is None:
            alphas[b] = 1.0
            continue
        unit_terms, n_pair, s1, s2 = parts
        d_e_num = 2.0 * (n_pair * s2 - s1 * s1)
        if d_e_num <= 1e-12 * max(n_pair * s2, 1.0):
            alphas[b] = 1.0
            continue
        d_o = float(unit_terms.sum()) / n_pair
        d_e = d_e_num / (n_pair * (n_pair - 1.0))
        alphas[b] = 1.0 - d_o / d_e
    tail = (1.0 - level) / 2.0
    low, high = np.quantile(alphas, [tail, 1.0 - tail])
    return (float(low), float(high))


@dataclass(frozen=True)
class AgreementResult:
    alpha: float
    ci: tuple
    level: float
    n_units: int
    n_raters: int
    n_pairable: int
    degenerate: bool = False

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "ci": [self.ci[0], self.ci[1]],
            "level": self.level,
            "n_units": self.n_units,
            "n_raters": self.n_raters,
            "n_pairable": self.n_pairable,
            "degenerate": self.degenerate,
        }


def agreement_result(m: RatingsMatrix, B: int = 1000, level: float = 0.95, seed: int = 0) -> AgreementResult:
    point = krippendorff_alpha(m)
    ci = bootstrap_ci(m, B=B, level=level, seed=seed)
    return AgreementResult(
        alpha=point.alpha,
        ci=ci,
        level=level,
        n_units=m.n_units,
        n_raters=m.n_raters,
        n_pairable=point.n_pairable,
        degenerate=point.degenerate,
    )


@dataclass(frozen=True)
class GateResult:
    passed: bool
    alpha: float
    ci: tuple
    threshold: float

    def to_json_dict(self) -> dict:
        return {
            "passed": self.passed,
            "alpha": self.alpha,
            "ci": [self.ci[0], self.ci[1]],
            "threshold": self.threshold,
        }


def reliability_gate(
    m: RatingsMatrix,
    threshold: float = DEFAULT_GATE_THRESHOLD,
    B: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> GateResult:
    """Advice merges only when alpha >= threshold."""
    res = agreement_result(m, B=B, level=level, seed=seed)
    return GateResult(
        passed=bool(res.alpha >= threshold),
        alpha=res.alpha,
        ci=res.ci,
        threshold=threshold,
    )


def load_ratings_csv(path) -> RatingsMatrix:
    """Long-format CSV: header unit_id,rater_id,value."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise AgreementError(f"{path}: empty ratings file") from None
        required = ["unit_id", "rater_id", "value"]
        if [h.lower() for h in header[:3]] != required:
            raise AgreementError(f"{path}: header must be {','.join(required)}")
        triples = []
        for line_no, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            try:
                triples.append((raw[0].strip(), raw[1].strip(), float(raw[2])))
            except (IndexError, ValueError):
                raise AgreementError(f"{path}: malformed row at line {line_no}") from None
    return RatingsMatrix.from_long(triples)

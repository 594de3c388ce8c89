"""Expert-in-the-loop orchestration: fit, extract rules, collect advice,
gate on inter-rater reliability, merge advice into training data, refit,
evaluate, version.

Merging is append-only augmentation of the pristine training table:
target corrections become weighted pseudo-observations, dose suggestions
substitute the advised dose while keeping the observed outcome, and rule
edits contribute synthetic rows sampled from the edited region. Every
version is reproducible bit-for-bit from the stored snapshot directory.
"""

from __future__ import annotations

import datetime
import json
import math
import os
from dataclasses import dataclass, replace
from types import MappingProxyType

import numpy as np

from .agreement import DEFAULT_GATE_THRESHOLD, RatingsMatrix, reliability_gate
from .dataset import Dataset, VisitRecord
from .glmmtree import GlmmTreeRegressor, fit_glmm_tree
from .rules import (
    ModifyThreshold,
    Rule,
    RuleEdit,
    RuleSet,
    apply_edit,
    encode,
    sample_from_rule,
)
from .synthetic import SyntheticTruth, generate_synthetic, misspecified_pair, truth_value

__all__ = [
    "LoopError",
    "GateError",
    "KIND_DOSE",
    "KIND_TARGET",
    "KIND_EDIT",
    "AdviceRecord",
    "AdvicePool",
    "MergePolicy",
    "LoopConfig",
    "EvalMetrics",
    "VersionMetrics",
    "LoopState",
    "ReplayResult",
    "RulePredictor",
    "mae",
    "rmse",
    "evaluate",
    "merge_advice",
    "init_state",
    "iterate",
    "OracleExpert",
    "oracle_expert",
    "run_loop",
    "save_snapshot",
    "load_snapshot",
    "snapshot_versions",
    "replay",
    "misspecified_scenario",
    "Scenario",
]

KIND_DOSE = "dose-suggestion"
KIND_TARGET = "target-correction"
KIND_EDIT = "rule-edit-ref"
_KINDS = (KIND_DOSE, KIND_TARGET, KIND_EDIT)

_EPOCH = datetime.datetime(2026, 1, 1)


class LoopError(ValueError):
    pass


class GateError(LoopError):
    """Raised when a merge is forced past a failed reliability gate."""


# -- advice ------------------------------------------------------------------


@dataclass(frozen=True)
class AdviceRecord:
    """One expert judgement on a shown (features, prediction, rule) tuple."""

    patient_id: str
    care_date: datetime.date
    x_snapshot: "MappingProxyType"
    y_hat: float
    rule_id: int
    advice: float | None
    advice_kind: str
    rater: str
    timestamp: str
    edit_ref: int | None = None

    def __post_init__(self):
        if self.advice_kind not in _KINDS:
            raise LoopError(f"unknown advice kind {self.advice_kind!r}")
        if self.advice_kind == KIND_EDIT:
            if self.edit_ref is None:
                raise LoopError("rule-edit-ref advice must reference a stored edit")
        else:
            if self.advice is None or not math.isfinite(self.advice):
                raise LoopError(f"{self.advice_kind} advice must be finite")
        object.__setattr__(self, "x_snapshot", MappingProxyType(dict(self.x_snapshot)))

    def to_json_dict(self) -> dict:
        # NaN feature values serialize as null (strict-JSON safe).
        x = {
            k: (None if v is None or not math.isfinite(v) else float(v))
            for k, v in self.x_snapshot.items()
        }
        return {
            "patient_id": self.patient_id,
            "care_date": self.care_date.isoformat(),
            "x_snapshot": x,
            "y_hat": self.y_hat,
            "rule_id": self.rule_id,
            "advice": self.advice,
            "advice_kind": self.advice_kind,
            "rater": self.rater,
            "timestamp": self.timestamp,
            "edit_ref": self.edit_ref,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "AdviceRecord":
        x = {k: (math.nan if v is None else float(v)) for k, v in d["x_snapshot"].items()}
        return cls(
            patient_id=d["patient_id"],
            care_date=datetime.date.fromisoformat(d["care_date"]),
            x_snapshot=x,
            y_hat=float(d["y_hat"]),
            rule_id=int(d["rule_id"]),
            advice=None if d.get("advice") is None else float(d["advice"]),
            advice_kind=d["advice_kind"],
            rater=d["rater"],
            timestamp=d["timestamp"],
            edit_ref=None if d.get("edit_ref") is None else int(d["edit_ref"]),
        )


class AdvicePool:
    """Append-only accumulator of advice records and staged rule edits."""

    def __init__(self, records=(), edits=()):
        self.records: list = list(records)
        self.edits: list = list(edits)

    def __len__(self) -> int:
        return len(self.records) + len(self.edits)

    def add(self, record: AdviceRecord) -> None:
        if not isinstance(record, AdviceRecord):
            raise LoopError("pool accepts AdviceRecord values")
        if record.advice_kind == KIND_EDIT and not 0 <= record.edit_ref < len(self.edits):
            raise LoopError(f"edit_ref {record.edit_ref} does not point into the stored edits")
        self.records.append(record)

    def add_edit(self, edit: RuleEdit, *, rater=None, timestamp=None) -> int:
        """Store an edit; returns its index and logs a rule-edit-ref record."""
        if not isinstance(edit, RuleEdit):
            raise LoopError("add_edit takes a RuleEdit")
        self.edits.append(edit)
        idx = len(self.edits) - 1
        self.records.append(
            AdviceRecord(
                patient_id="",
                care_date=_EPOCH.date(),
                x_snapshot={},
                y_hat=math.nan,
                rule_id=edit.rule_id,
                advice=None,
                advice_kind=KIND_EDIT,
                rater=edit.author if rater is None else rater,
                timestamp=edit.timestamp if timestamp is None else timestamp,
                edit_ref=idx,
            )
        )
        return idx

    def numeric_records(self) -> list:
        return [r for r in self.records if r.advice_kind != KIND_EDIT]

    def to_json_dict(self) -> dict:
        return {
            "records": [r.to_json_dict() for r in self.records],
            "edits": [e.to_json_dict() for e in self.edits],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "AdvicePool":
        return cls(
            records=[AdviceRecord.from_json_dict(r) for r in d.get("records", ())],
            edits=[RuleEdit.from_json_dict(e) for e in d.get("edits", ())],
        )


# -- policy and config -------------------------------------------------------


@dataclass(frozen=True)
class MergePolicy:
    """How advice becomes training rows.

    synthetic_noise_sd = None means: use the current model's residual sd
    for rule-edit synthetic rows. ranges = None derives per-feature ranges
    from the observed training data.
    """

    advice_weight: float = 1.0
    samples_per_rule: int = 50
    rule_features: bool = False
    synthetic_noise_sd: float | None = None
    gate_threshold: float = DEFAULT_GATE_THRESHOLD
    seed: int = 0
    ranges: tuple | None = None

    def __post_init__(self):
        if self.advice_weight <= 0:
            raise LoopError("advice_weight must be positive")
        if self.samples_per_rule < 0:
            raise LoopError("samples_per_rule must be >= 0")
        if self.ranges is not None:
            object.__setattr__(
                self,
                "ranges",
                tuple((str(nm), (float(lo), float(hi))) for nm, (lo, hi) in self.ranges),
            )

    def to_json_dict(self) -> dict:
        return {
            "advice_weight": self.advice_weight,
            "samples_per_rule": self.samples_per_rule,
            "rule_features": self.rule_features,
            "synthetic_noise_sd": self.synthetic_noise_sd,
            "gate_threshold": self.gate_threshold,
            "seed": self.seed,
            "ranges": None
            if self.ranges is None
            else [[nm, [lo, hi]] for nm, (lo, hi) in self.ranges],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MergePolicy":
        ranges = d.get("ranges")
        return cls(
            advice_weight=float(d.get("advice_weight", 1.0)),
            samples_per_rule=int(d.get("samples_per_rule", 50)),
            rule_features=bool(d.get("rule_features", False)),
            synthetic_noise_sd=None
            if d.get("synthetic_noise_sd") is None
            else float(d["synthetic_noise_sd"]),
            gate_threshold=float(d.get("gate_threshold", DEFAULT_GATE_THRESHOLD)),
            seed=int(d.get("seed", 0)),
            ranges=None if ranges is None else tuple((nm, (lo, hi)) for nm, (lo, hi) in ranges),
        )


@dataclass(frozen=True)
class LoopConfig:
    """Model parameters plus merge policy; everything a refit needs."""

    regressors: tuple = ("EPO_DOSE",)
    partitioners: tuple | None = None
    min_node_size: int = 20
    max_depth: int = 10
    alpha_split: float = 0.05
    max_iter: int = 10
    criterion: str = "REML"
    seed: int = 0
    policy: MergePolicy = MergePolicy()

    def __post_init__(self):
        object.__setattr__(self, "regressors", tuple(self.regressors))
        if self.partitioners is not None:
            object.__setattr__(self, "partitioners", tuple(self.partitioners))

    def to_json_dict(self) -> dict:
        return {
            "regressors": list(self.regressors),
            "partitioners": None if self.partitioners is None else list(self.partitioners),
            "min_node_size": self.min_node_size,
            "max_depth": self.max_depth,
            "alpha_split": self.alpha_split,
            "max_iter": self.max_iter,
            "criterion": self.criterion,
            "seed": self.seed,
            "policy": self.policy.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "LoopConfig":
        return cls(
            regressors=tuple(d["regressors"]),
            partitioners=None if d.get("partitioners") is None else tuple(d["partitioners"]),
            min_node_size=int(d.get("min_node_size", 20)),
            max_depth=int(d.get("max_depth", 10)),
            alpha_split=float(d.get("alpha_split", 0.05)),
            max_iter=int(d.get("max_iter", 10)),
            criterion=d.get("criterion", "REML"),
            seed=int(d.get("seed", 0)),
            policy=MergePolicy.from_json_dict(d.get("policy", {})),
        )


# -- metrics -----------------------------------------------------------------


def mae(predictions, truths) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    truths = np.asarray(truths, dtype=np.float64).ravel()
    return float(np.mean(np.abs(predictions - truths)))


def rmse(predictions, truths) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    truths = np.asarray(truths, dtype=np.float64).ravel()
    return float(np.sqrt(np.mean((predictions - truths) ** 2)))


@dataclass(frozen=True)
class EvalMetrics:
    mae: float
    rmse: float
    n: int
    split: str = ""

    def to_json_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "n": self.n, "split": self.split}

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalMetrics":
        return cls(mae=float(d["mae"]), rmse=float(d["rmse"]), n=int(d["n"]), split=d.get("split", ""))


def evaluate(predictions, truths, split: str = "") -> EvalMetrics:
    """Mean absolute and root-mean-square error over paired finite values."""
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    truths = np.asarray(truths, dtype=np.float64).ravel()
    if len(predictions) != len(truths):
        raise LoopError("predictions and truths must have equal length")
    keep = np.isfinite(truths)
    predictions, truths = predictions[keep], truths[keep]
    if len(truths) == 0:
        raise LoopError("evaluate needs at least one observed truth")
    return EvalMetrics(
        mae=mae(predictions, truths),
        rmse=rmse(predictions, truths),
        n=int(len(truths)),
        split=split,
    )


@dataclass(frozen=True)
class VersionMetrics:
    version: int
    train: EvalMetrics | None
    test: EvalMetrics | None
    advice_loss: float | None
    alpha: float | None
    gate_passed: bool
    n_records: int
    n_edits: int
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "version": self.version,
            "train": None if self.train is None else self.train.to_json_dict(),
            "test": None if self.test is None else self.test.to_json_dict(),
            "advice_loss": self.advice_loss,
            "alpha": self.alpha,
            "gate_passed": self.gate_passed,
            "n_records": self.n_records,
            "n_edits": self.n_edits,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "VersionMetrics":
        return cls(
            version=int(d["version"]),
            train=None if d.get("train") is None else EvalMetrics.from_json_dict(d["train"]),
            test=None if d.get("test") is None else EvalMetrics.from_json_dict(d["test"]),
            advice_loss=None if d.get("advice_loss") is None else float(d["advice_loss"]),
            alpha=None if d.get("alpha") is None else float(d["alpha"]),
            gate_passed=bool(d.get("gate_passed", True)),
            n_records=int(d.get("n_records", 0)),
            n_edits=int(d.get("n_edits", 0)),
            seed=int(d.get("seed", 0)),
        )


# -- loop state --------------------------------------------------------------


@dataclass(frozen=True)
class LoopState:
    """One version of the loop: active rules, variances, history, config."""

    version: int
    rule_set: RuleSet
    sigma2: float
    sigma_b2: float
    b_hat: dict
    config: LoopConfig
    history: tuple = ()
    rejections: tuple = ()
    flags: tuple = ()

    def __post_init__(self):
        if self.version < 0:
            raise LoopError("version must be >= 0")
        object.__setattr__(self, "b_hat", dict(self.b_hat))
        object.__setattr__(self, "history", tuple(self.history))
        object.__setattr__(self, "rejections", tuple(self.rejections))
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def metrics(self) -> "VersionMetrics | None":
        return self.history[-1] if self.history else None


def _derived_seed(config: LoopConfig, version: int) -> int:
    return (int(config.seed) ^ int(version)) & 0xFFFFFFFFFFFFFFFF


# -- predictions from stored rules -------------------------------------------


class RulePredictor:
    """Predict from a RuleSet plus stored variances, no fitted tree needed.

    A row is scored by the first rule it satisfies; rows matching no rule
    (possible after edits open gaps) fall back to the rule violating the
    fewest conditions, lowest id on ties.
    """

    def __init__(
        self,
        rule_set: RuleSet,
        sigma2: float = 0.0,
        sigma_b2: float = 0.0,
        b_hat=None,
        feature_names=None,
    ):
        if not rule_set.rules:
            raise LoopError("RulePredictor needs at least one rule")
        self.rule_set = rule_set
        self.sigma2 = float(sigma2)
        self.sigma_b2 = float(sigma_b2)
        self.b_hat = dict(b_hat or {})
        self.feature_names = None if feature_names is None else tuple(feature_names)

    def _names(self, feature_names):
        names = self.feature_names if feature_names is None else tuple(feature_names)
        if names is None:
            raise LoopError("RulePredictor needs feature names")
        return names

    def assign(self, X, feature_names=None) -> np.ndarray:
        """Index (into rule_set.rules) of the rule scoring each row."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        names = self._names(feature_names)
        M, _ = encode(self.rule_set, X, names)
        idx = np.argmax(M, axis=1)
        unmatched = ~M.any(axis=1)
        if unmatched.any():
            col = {f: j for j, f in enumerate(names)}
            viol = np.zeros((int(unmatched.sum()), len(self.rule_set.rules)), dtype=np.int64)
            rows = X[unmatched]
            for i, rule in enumerate(self.rule_set.rules):
                for c in rule.conditions:
                    v = rows[:, col[c.feature]]
                    ok = (v <= c.threshold) if c.op == "le" else (v > c.threshold)
                    ok &= np.isfinite(v)
                    viol[:, i] += (~ok).astype(np.int64)
            idx[unmatched] = np.argmin(viol, axis=1)
        return idx

    def predict(self, X, feature_names=None, clusters=None, mode: str = "marginal") -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        names = self._names(feature_names)
        reg_idx = [names.index(r) for r in self.rule_set.regressors]
        X_reg = X[:, reg_idx] if reg_idx else np.empty((len(X), 0))
        idx = self.assign(X, names)
        pred = np.empty(len(X))
        for i, rule in enumerate(self.rule_set.rules):
            sel = idx == i
            if sel.any():
                pred[sel] = rule.model.predict(X_reg[sel])
        if mode == "conditional" and clusters is not None:
            clusters = np.asarray(clusters, dtype=object).ravel()
            pred = pred + np.array([self.b_hat.get(c, 0.0) for c in clusters])
        return pred

    def dose_response(
        self,
        features,
        current_hb: float,
        dose_grid,
        cluster=None,
        mode: str = "marginal",
        feature_names=None,
    ) -> list:
        """What-if grid for one visit: substitute each dose into the first
        regressor and predict. Returns DoseResponsePoint values."""
        from .glmmtree import DoseResponsePoint

        names = self._names(feature_names)
        if not self.rule_set.regressors:
            raise LoopError("dose response needs a rule set with a dose regressor")
        dose_col = names.index(self.rule_set.regressors[0])
        grid = [float(v) for v in dose_grid]
        if isinstance(features, dict):
            row = np.array([features.get(f, math.nan) for f in names], dtype=np.float64)
        else:
            row = np.asarray(features, dtype=np.float64).ravel()
        rows = np.tile(row, (len(grid), 1))
        rows[:, dose_col] = grid
        clusters = None if cluster is None else [cluster] * len(grid)
        delta = self.predict(rows, names, clusters=clusters, mode=mode)
        return [
            DoseResponsePoint(dose=d, delta_hb=float(dh), projected_hb=float(current_hb + dh))
            for d, dh in zip(grid, delta)
        ]


# -- merging advice into data ------------------------------------------------


def _derive_ranges(train: Dataset, policy: MergePolicy) -> tuple:
    """Per-feature (lo, hi) from observed data, policy overrides on top."""
    overrides = dict(policy.ranges or ())
    out = []
    for j, name in enumerate(train.schema):
        if name in overrides:
            out.append((name, overrides[name]))
            continue
        col = train.X[:, j]
        finite = col[np.isfinite(col)]
        if len(finite) == 0:
            lo, hi = 0.0, 1.0
        else:
            lo, hi = float(finite.min()), float(finite.max())
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
        out.append((name, (lo, hi)))
    return tuple(out)


def merge_advice(
    train: Dataset,
    pool: AdvicePool,
    policy: MergePolicy,
    *,
    rule_set: RuleSet | None = None,
    sigma: float | None = None,
    gate=None,
) -> Dataset:
    """Append-only augmentation of train with pseudo-observations.

    Target corrections copy the shown row with the advised target at
    policy.advice_weight. Dose suggestions write the advised dose into the
    dose regressor, keeping the observed outcome; suggestions on rows with
    no observed outcome are display-only and add nothing. Each stored rule
    edit contributes policy.samples_per_rule synthetic rows drawn from the
    edited region. With policy.rule_features, rule-membership indicator
    columns are appended to the merged table. Passing the pool's GateResult
    as gate makes a failed reliability gate a hard error here.
    """
    if gate is not None and not gate.passed:
        raise GateError(
            f"reliability gate failed (alpha={gate.alpha:.6g} < {gate.threshold:g}); "
            "advice must not be merged"
        )
    if len(pool) == 0 and not policy.rule_features:
        return train
    dose_feature = None
    if rule_set is not None and rule_set.regressors:
        dose_feature = rule_set.regressors[0]

    # (patient_id, care_date) -> row for observed-outcome lookup.
    key_to_row = {
        (str(train.patient_ids[i]), train.care_dates[i]): i for i in range(train.n_records)
    }
    new_records = []
    used_keys = set()

    def claim(pid_base: str, rater: str, date: datetime.date) -> str:
        base = f"{pid_base}/advice/{rater}"
        pid = base
        k = 2
        while (pid, date) in used_keys:
            pid = f"{base}/{k}"
            k += 1
        used_keys.add((pid, date))
        return pid

    for rec in pool.records:
        if rec.advice_kind == KIND_EDIT:
            continue
        feats = {f: rec.x_snapshot.get(f, math.nan) for f in train.schema}
        if rec.advice_kind == KIND_TARGET:
            target = float(rec.advice)
        else:
            if dose_feature is None or dose_feature not in train.schema:
                raise LoopError("dose suggestions need a rule set naming the dose regressor")
            feats[dose_feature] = float(rec.advice)
            row = key_to_row.get((rec.patient_id, rec.care_date))
            observed = None if row is None else float(train.target[row])
            if observed is None or not math.isfinite(observed):
                continue  # display-only: no observed outcome to supervise on
            target = observed
        pid = claim(rec.patient_id, rec.rater, rec.care_date)
        new_records.append(
            VisitRecord(
                patient_id=pid,
                care_date=rec.care_date,
                features=feats,
                target=target,
                weight=policy.advice_weight,
                source="advice",
            )
        )

    working_rs = rule_set
    if pool.edits:
        if rule_set is None:
            raise LoopError("rule edits need the active rule set")
        ranges = _derive_ranges(train, policy)
        noise_sd = policy.synthetic_noise_sd
        if noise_sd is None:
            noise_sd = float(sigma) if sigma is not None else 0.0
        for j, edit in enumerate(pool.edits):
            outcome = apply_edit(working_rs, edit, feature_names=train.schema)
            working_rs = outcome.rule_set
            if policy.samples_per_rule == 0:
                continue
            edit_seed = (int(policy.seed) ^ (1000003 * (j + 1))) & 0xFFFFFFFFFFFFFFFF
            new_records.extend(
                sample_from_rule(
                    outcome.report.rule,
                    ranges,
                    policy.samples_per_rule,
                    noise_sd=noise_sd,
                    seed=edit_seed,
                    regressors=working_rs.regressors,
                    target_name=train.target_name,
                    weight=policy.advice_weight,
                )
            )

    merged = train.append_records(new_records) if new_records else train
    if policy.rule_features and working_rs is not None and working_rs.rules:
        M, _ = encode(working_rs, merged.X, merged.schema)
        names = tuple(f"rule_{r.id}" for r in working_rs.rules)
        merged = merged.with_columns(names, M.astype(np.float64))
    return merged


# -- the loop ----------------------------------------------------------------


def _fit(config: LoopConfig, d: Dataset) -> GlmmTreeRegressor:
    return fit_glmm_tree(
        d,
        regressors=config.regressors,
        partitioners=config.partitioners,
        min_node_size=config.min_node_size,
        max_depth=config.max_depth,
        alpha_split=config.alpha_split,
        max_iter=config.max_iter,
        criterion=config.criterion,
    )


def _with_rule_features(d: Dataset, rs: RuleSet | None, policy: MergePolicy) -> Dataset:
    if not policy.rule_features or rs is None or not rs.rules:
        return d
    M, _ = encode(rs, d.X, d.schema)
    names = tuple(f"rule_{r.id}" for r in rs.rules)
    return d.with_columns(names, M.astype(np.float64))


def _eval_on(est: GlmmTreeRegressor, d: Dataset, split: str, mode: str) -> EvalMetrics | None:
    mask = np.isfinite(d.target)
    if not mask.any():
        return None
    X, y = d.X[mask], d.target[mask]
    clusters = d.patient_ids[mask] if mode == "conditional" else None
    pred = est.predict(X, clusters=clusters, mode=mode)
    return evaluate(pred, y, split=split)


def _advice_loss(est: GlmmTreeRegressor, pool: AdvicePool, schema, rs: RuleSet | None) -> float | None:
    """Mean |prediction - advised value| over numeric advice, under the
    refit model (dose suggestions scored at the advised dose)."""
    numeric = pool.numeric_records()
    if not numeric:
        return None
    dose_feature = rs.regressors[0] if rs is not None and rs.regressors else None
    needs_rule_cols = rs is not None and any(
        name not in schema for name in est.feature_names_
    )
    X = np.empty((len(numeric), len(est.feature_names_)))
    targets = np.empty(len(numeric))
    for i, rec in enumerate(numeric):
        feats = {f: rec.x_snapshot.get(f, math.nan) for f in schema}
        if rec.advice_kind == KIND_DOSE and dose_feature is not None:
            feats[dose_feature] = float(rec.advice)
        if needs_rule_cols:
            row = np.array([[feats.get(f, math.nan) for f in schema]])
            M, _ = encode(rs, row, schema)
            for k, rule in enumerate(rs.rules):
                feats[f"rule_{rule.id}"] = float(M[0, k])
        X[i] = [feats.get(f, math.nan) for f in est.feature_names_]
        targets[i] = float(rec.advice)
    pred = est.predict(X, mode="marginal")
    return float(np.mean(np.abs(pred - targets)))


def _ratings_from_pool(pool: AdvicePool) -> RatingsMatrix | None:
    """Units are shown visits, raters are advice authors; None when no unit
    has two raters (single-expert pools cannot measure agreement)."""
    triples = []
    seen = set()
    for rec in pool.numeric_records():
        unit = f"{rec.patient_id}|{rec.care_date.isoformat()}|{rec.advice_kind}"
        key = (unit, rec.rater)
        if key in seen:
            continue  # a rater's repeat on the same unit: keep the first
        seen.add(key)
        triples.append((unit, rec.rater, float(rec.advice)))
    if not triples:
        return None
    m = RatingsMatrix.from_long(triples)
    if not m.pairable_units().any():
        return None
    return m


def init_state(train: Dataset, config: LoopConfig, test: Dataset | None = None) -> LoopState:
    """Fit version 0 on the pristine training data."""
    est = _fit(config, train)
    rs = est.rule_set(version=0)
    vm = VersionMetrics(
        version=0,
        train=_eval_on(est, train, "train", "conditional"),
        test=None if test is None else _eval_on(est, test, "test", "marginal"),
        advice_loss=None,
        alpha=None,
        gate_passed=True,
        n_records=0,
        n_edits=0,
        seed=_derived_seed(config, 0),
    )
    return LoopState(
        version=0,
        rule_set=rs,
        sigma2=est.sigma2_,
        sigma_b2=est.sigma_b2_,
        b_hat=dict(est.b_hat_),
        config=config,
        history=(vm,),
        flags=tuple(f"v0:{f}" for f in est.flags_),
    )


def iterate(
    state: LoopState,
    pool: AdvicePool,
    train: Dataset,
    test: Dataset | None = None,
    *,
    ratings: RatingsMatrix | None = None,
) -> LoopState:
    """One loop turn: gate, merge, refit, re-extract rules, evaluate.

    A failed gate returns the state unchanged except for a logged
    rejection. The merge always starts from the pristine train table plus
    the full accumulated pool, so iterations are replayable from
    snapshots alone.
    """
    policy = state.config.policy
    alpha = None
    flags = []
    if ratings is None:
        ratings = _ratings_from_pool(pool)
        if ratings is None and len(pool) > 0:
            flags.append("gate-skipped-unpairable")
    if ratings is not None:
        gate = reliability_gate(ratings, threshold=policy.gate_threshold, seed=policy.seed)
        alpha = gate.alpha
        if not gate.passed:
            rejection = (
                f"v{state.version}: gate failed, alpha={gate.alpha:.6g}"
                f" < {policy.gate_threshold:g} ({len(pool.records)} records held)"
            )
            return replace(state, rejections=state.rejections + (rejection,))

    merged = merge_advice(
        train, pool, policy, rule_set=state.rule_set, sigma=math.sqrt(max(state.sigma2, 0.0))
    )
    est = _fit(state.config, merged)
    version = state.version + 1
    rs = est.rule_set(version=version)

    eval_rs = state.rule_set if policy.rule_features else None
    eval_train = _with_rule_features(train, eval_rs, policy)
    eval_test = None if test is None else _with_rule_features(test, eval_rs, policy)
    vm = VersionMetrics(
        version=version,
        train=_eval_on(est, eval_train, "train", "conditional"),
        test=None if eval_test is None else _eval_on(est, eval_test, "test", "marginal"),
        advice_loss=_advice_loss(est, pool, eval_train.schema, state.rule_set),
        alpha=alpha,
        gate_passed=True,
        n_records=len(pool.records),
        n_edits=len(pool.edits),
        seed=_derived_seed(state.config, version),
    )
    return LoopState(
        version=version,
        rule_set=rs,
        sigma2=est.sigma2_,
        sigma_b2=est.sigma_b2_,
        b_hat=dict(est.b_hat_),
        config=state.config,
        history=state.history + (vm,),
        rejections=state.rejections,
        flags=state.flags + tuple(f"v{version}:{f}" for f in list(est.flags_) + flags),
    )


# -- simulated expert --------------------------------------------------------


@dataclass(frozen=True)
class OracleExpert:
    """Stand-in for a human rater on synthetic cohorts: advises the planted
    truth's mean response (plus optional noise) as a target correction."""

    truth: SyntheticTruth
    noise_sd: float = 0.0
    rater: str = "oracle"
    seed: int = 0

    def advise(
        self,
        features,
        y_hat: float,
        rule_id: int,
        *,
        patient_id: str,
        care_date: datetime.date,
        timestamp: str | None = None,
        index: int = 0,
    ) -> AdviceRecord:
        a = truth_value(self.truth, features)
        if self.noise_sd > 0:
            rng = np.random.default_rng((int(self.seed), int(index)))
            a += float(rng.normal(0.0, self.noise_sd))
        if timestamp is None:
            timestamp = (_EPOCH + datetime.timedelta(minutes=index)).isoformat()
        return AdviceRecord(
            patient_id=patient_id,
            care_date=care_date,
            x_snapshot=dict(features),
            y_hat=float(y_hat),
            rule_id=int(rule_id),
            advice=float(a),
            advice_kind=KIND_TARGET,
            rater=self.rater,
            timestamp=timestamp,
        )

    def edit_toward(
        self,
        rule: Rule,
        feature: str,
        planted_threshold: float,
        rho: float = 1.0,
        *,
        timestamp: str | None = None,
    ) -> RuleEdit:
        """Move a displayed threshold a fraction rho toward the planted one."""
        current = None
        for c in rule.conditions:
            if c.feature == feature:
                current = c.threshold
                break
        if current is None:
            raise LoopError(f"rule {rule.id} has no condition on {feature!r}")
        new_thr = current + rho * (planted_threshold - current)
        return RuleEdit(
            rule_id=rule.id,
            operations=(ModifyThreshold(feature=feature, new_threshold=new_thr),),
            author=self.rater,
            timestamp=timestamp or _EPOCH.isoformat(),
        )


def oracle_expert(
    truth: SyntheticTruth,
    x,
    y_hat: float,
    rule: Rule | int,
    *,
    patient_id: str = "synthetic",
    care_date: datetime.date | None = None,
    rater: str = "oracle",
    noise_sd: float = 0.0,
    seed: int = 0,
    index: int = 0,
    timestamp: str | None = None,
) -> AdviceRecord:
    """Functional form of OracleExpert.advise for one shown tuple."""
    rid = rule.id if isinstance(rule, Rule) else int(rule)
    expert = OracleExpert(truth=truth, noise_sd=noise_sd, rater=rater, seed=seed)
    return expert.advise(
        x,
        y_hat,
        rid,
        patient_id=patient_id,
        care_date=care_date or _EPOCH.date(),
        timestamp=timestamp,
        index=index,
    )


# -- snapshots ---------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def _snapshot_payloads(state: LoopState, pool: AdvicePool) -> dict:
    variances = {
        "sigma2": state.sigma2,
        "sigma_b2": state.sigma_b2,
        "b_hat": {k: state.b_hat[k] for k in sorted(state.b_hat)},
    }
    config = {
        "version": state.version,
        "derived_seed": _derived_seed(state.config, state.version),
        "config": state.config.to_json_dict(),
        "rejections": list(state.rejections),
        "flags": list(state.flags),
    }
    return {
        "rules.json": state.rule_set.to_json(indent=2) + "\n",
        "variances.json": _dumps(variances),
        "metrics.json": _dumps([vm.to_json_dict() for vm in state.history]),
        "pool.json": _dumps(pool.to_json_dict()),
        "config.json": _dumps(config),
    }


def save_snapshot(root, state: LoopState, pool: AdvicePool) -> str:
    """Write v{NNNN}/ under root; returns the directory path."""
    d = os.path.join(str(root), f"v{state.version:04d}")
    os.makedirs(d, exist_ok=True)
    for name, text in _snapshot_payloads(state, pool).items():
        with open(os.path.join(d, name), "w", encoding="utf-8") as fh:
            fh.write(text)
    return d


def snapshot_versions(root) -> list:
    out = []
    if not os.path.isdir(str(root)):
        return out
    for name in sorted(os.listdir(str(root))):
        if name.startswith("v") and name[1:].isdigit():
            out.append(int(name[1:]))
    return out


def load_snapshot(root, version: int):
    """Rebuild (LoopState, AdvicePool) from a snapshot directory."""
    d = os.path.join(str(root), f"v{version:04d}")

    def read(name):
        with open(os.path.join(d, name), encoding="utf-8") as fh:
            return json.load(fh)

    rules = RuleSet.from_json_dict(read("rules.json"))
    variances = read("variances.json")
    history = tuple(VersionMetrics.from_json_dict(v) for v in read("metrics.json"))
    pool = AdvicePool.from_json_dict(read("pool.json"))
    conf = read("config.json")
    state = LoopState(
        version=int(conf["version"]),
        rule_set=rules,
        sigma2=float(variances["sigma2"]),
        sigma_b2=float(variances["sigma_b2"]),
        b_hat={k: float(v) for k, v in variances["b_hat"].items()},
        config=LoopConfig.from_json_dict(conf["config"]),
        history=history,
        rejections=tuple(conf.get("rejections", ())),
        flags=tuple(conf.get("flags", ())),
    )
    return state, pool


@dataclass(frozen=True)
class ReplayResult:
    identical: bool
    versions: tuple
    mismatches: tuple = ()

    def to_json_dict(self) -> dict:
        return {
            "identical": self.identical,
            "versions": list(self.versions),
            "mismatches": list(self.mismatches),
        }


def replay(root, train: Dataset, test: Dataset | None = None) -> ReplayResult:
    """Re-run every stored iteration from the v0 snapshot and byte-compare
    the recomputed snapshot files against the stored ones."""
    versions = snapshot_versions(root)
    if not versions:
        raise LoopError(f"no snapshots under {root}")
    state, _ = load_snapshot(root, versions[0])
    mismatches = []
    for v in versions[1:]:
        stored_state, stored_pool = load_snapshot(root, v)
        state = iterate(state, stored_pool, train, test)
        want = _snapshot_payloads(stored_state, stored_pool)
        got = _snapshot_payloads(state, stored_pool)
        for name in want:
            if want[name] != got[name]:
                mismatches.append(f"v{v:04d}/{name}")
    return ReplayResult(
        identical=not mismatches, versions=tuple(versions), mismatches=tuple(mismatches)
    )


# -- the misspecified-start closed-loop scenario ------------------------------


@dataclass(frozen=True)
class Scenario:
    train: Dataset
    test: Dataset
    truth: SyntheticTruth
    corrupt: SyntheticTruth
    config: LoopConfig


def misspecified_scenario(
    seed: int = 0,
    n_clusters: int = 120,
    visits_per_cluster: int = 20,
    advice_weight: float = 5.0,
) -> Scenario:
    """Training cohort from a corrupted truth, test cohort from the clean
    one; the oracle's target corrections pull refits toward the clean
    models, so test error must fall as advice accumulates."""
    corrupt, clean = misspecified_pair(
        n_clusters=n_clusters, visits_per_cluster=visits_per_cluster
    )
    train, _ = generate_synthetic(corrupt, seed=seed)
    test, _ = generate_synthetic(clean, seed=seed + 1)
    config = LoopConfig(
        regressors=clean.rules.regressors,
        seed=seed,
        policy=MergePolicy(advice_weight=advice_weight, seed=seed),
    )
    return Scenario(train=train, test=test, truth=clean, corrupt=corrupt, config=config)


def run_loop(
    train: Dataset,
    test: Dataset | None,
    config: LoopConfig,
    expert: OracleExpert,
    iterations: int,
    snapshot_dir=None,
    batch_size: int = 200,
):
    """Drive `iterations` oracle-advised turns; returns (states, pool).

    Each turn shows the expert the next batch_size training rows (with the
    current model's marginal prediction and assigned rule) and merges the
    accumulated advice. Snapshots are written per version when
    snapshot_dir is given.
    """
    if iterations < 0:
        raise LoopError("iterations must be >= 0")
    state = init_state(train, config, test=test)
    states = [state]
    pool = AdvicePool()
    if snapshot_dir is not None:
        save_snapshot(snapshot_dir, state, pool)
    records = train.records
    n = len(records)
    for k in range(1, iterations + 1):
        start, stop = (k - 1) * batch_size, min(k * batch_size, n)
        if start < stop:
            predictor = RulePredictor(
                state.rule_set, state.sigma2, state.sigma_b2, state.b_hat
            )
            X_batch = train.X[start:stop]
            y_hat = predictor.predict(X_batch, train.schema)
            assigned = predictor.assign(X_batch, train.schema)
            for offset, i in enumerate(range(start, stop)):
                rec = records[i]
                rule = state.rule_set.rules[assigned[offset]]
                pool.add(
                    expert.advise(
                        dict(rec.features),
                        float(y_hat[offset]),
                        rule.id,
                        patient_id=rec.patient_id,
                        care_date=rec.care_date,
                        index=i,
                    )
                )
        state = iterate(state, pool, train, test)
        states.append(state)
        if snapshot_dir is not None:
            save_snapshot(snapshot_dir, state, pool)
    return states, pool

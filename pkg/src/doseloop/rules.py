"""Editable IF-THEN dose-response rules extracted from fitted trees.

A rule is a conjunction of axis-aligned conditions plus a linear model in
the regressors. Learned rule sets partition the covariate domain (one rule
per tree leaf); edited sets may break the partition and are consumed only
through validation reports and synthetic sampling, never as the deployed
predictor. The JSON wire format is fixed field-for-field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .tree import NodeModel, TreeNode, iter_leaves
from .validation import check_matrix, check_rng

__all__ = [
    "OP_LE",
    "OP_GT",
    "RuleError",
    "UnknownRuleError",
    "UnknownFeatureError",
    "UnsatisfiableRuleError",
    "InfeasibleRegionError",
    "Condition",
    "Rule",
    "RuleSet",
    "ModifyThreshold",
    "AddCondition",
    "RemoveCondition",
    "SetModel",
    "RuleEdit",
    "EditReport",
    "EditOutcome",
    "extract_rules",
    "encode",
    "apply_edit",
    "validate",
    "ValidationReport",
    "sample_from_rule",
    "rule_to_text",
]

OP_LE = "le"
OP_GT = "gt"


class RuleError(ValueError):
    pass


class UnknownRuleError(RuleError):
    pass


class UnknownFeatureError(RuleError):
    pass


class UnsatisfiableRuleError(RuleError):
    pass


class InfeasibleRegionError(RuleError):
    pass


@dataclass(frozen=True)
class Condition:
    feature: str
    op: str
    threshold: float

    def __post_init__(self):
        if self.op not in (OP_LE, OP_GT):
            raise RuleError(f"op must be 'le' or 'gt', got {self.op!r}")
        if not math.isfinite(self.threshold):
            raise RuleError(f"threshold must be finite, got {self.threshold!r}")

    def holds(self, value: float) -> bool:
        if value is None or (isinstance(value, float) and math.isnan(value)):
            return False
        return value <= self.threshold if self.op == OP_LE else value > self.threshold

    def to_json_dict(self) -> dict:
        return {"feature": self.feature, "op": self.op, "threshold": float(self.threshold)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Condition":
        return cls(feature=d["feature"], op=d["op"], threshold=float(d["threshold"]))


@dataclass(frozen=True)
class Rule:
    id: int
    conditions: tuple
    model: NodeModel
    support: int
    provenance: str = "learned"

    def __post_init__(self):
        if self.provenance not in ("learned", "edited"):
            raise RuleError(f"provenance must be 'learned' or 'edited', got {self.provenance!r}")
        if self.support < 0:
            raise RuleError("support must be >= 0")
        object.__setattr__(self, "conditions", tuple(self.conditions))

    def satisfies(self, features) -> bool:
        return all(c.holds(features.get(c.feature)) for c in self.conditions)

    def to_json_dict(self) -> dict:
        return {
            "id": int(self.id),
            "conditions": [c.to_json_dict() for c in self.conditions],
            "model": {
                "beta0": float(self.model.beta0),
                "beta1": [float(b) for b in self.model.beta1],
            },
            "support": int(self.support),
            "provenance": self.provenance,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Rule":
        return cls(
            id=int(d["id"]),
            conditions=tuple(Condition.from_json_dict(c) for c in d["conditions"]),
            model=NodeModel(float(d["model"]["beta0"]), tuple(float(b) for b in d["model"]["beta1"])),
            support=int(d["support"]),
            provenance=d["provenance"],
        )


@dataclass(frozen=True)
class RuleSet:
    rules: tuple
    version: int = 0
    regressors: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "regressors", tuple(self.regressors))
        ids = [r.id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise RuleError("rule ids must be unique")

    def rule(self, rule_id: int) -> Rule:
        for r in self.rules:
            if r.id == rule_id:
                return r
        raise UnknownRuleError(f"no rule with id {rule_id}")

    def condition_features(self) -> tuple:
        seen: dict = {}
        for r in self.rules:
            for c in r.conditions:
                seen.setdefault(c.feature, None)
        return tuple(seen)

    def to_json_dict(self) -> dict:
        return {
            "version": int(self.version),
            "regressors": list(self.regressors),
            "rules": [r.to_json_dict() for r in self.rules],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_json_dict(), ensure_ascii=False, indent=indent)

    @classmethod
    def from_json_dict(cls, d: dict) -> "RuleSet":
        return cls(
            rules=tuple(Rule.from_json_dict(r) for r in d["rules"]),
            version=int(d["version"]),
            regressors=tuple(d["regressors"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "RuleSet":
        return cls.from_json_dict(json.loads(text))


def _collapse(conditions) -> tuple:
    """Merge same-feature same-direction conditions to the tightest one,
    keeping first-occurrence order."""
    order: list = []
    tight: dict = {}
    for c in conditions:
        key = (c.feature, c.op)
        if key not in tight:
            order.append(key)
            tight[key] = c.threshold
        elif c.op == OP_LE:
            tight[key] = min(tight[key], c.threshold)
        else:
            tight[key] = max(tight[key], c.threshold)
    return tuple(Condition(f, op, tight[(f, op)]) for f, op in order)


def satisfiable(conditions) -> bool:
    """Interval test: for every feature the open lower bound from 'gt'
    conditions must sit strictly below the 'le' upper bound."""
    lo: dict = {}
    hi: dict = {}
    for c in conditions:
        if c.op == OP_GT:
            lo[c.feature] = max(lo.get(c.feature, -math.inf), c.threshold)
        else:
            hi[c.feature] = min(hi.get(c.feature, math.inf), c.threshold)
    for f in set(lo) & set(hi):
        if lo[f] >= hi[f]:
            return False
    return True


def extract_rules(tree: TreeNode, feature_names, regressors=(), version: int = 0) -> RuleSet:
    """One rule per leaf: the root-to-leaf conjunction (collapsed), the leaf
    model, and the leaf's training support. Ids count leaves from 1 in
    left-first order."""
    feature_names = tuple(feature_names)
    rules = []
    for i, (leaf, path) in enumerate(iter_leaves(tree), start=1):
        conds = _collapse(
            Condition(feature_names[f], op, float(t)) for f, op, t in path
        )
        rules.append(
            Rule(
                id=i,
                conditions=conds,
                model=leaf.model,
                support=int(leaf.n_samples),
                provenance="learned",
            )
        )
    return RuleSet(rules=tuple(rules), version=version, regressors=tuple(regressors))


def encode(rs: RuleSet, X, feature_names) -> tuple:
    """Membership matrix over rows of X.

    Returns (M, flagged): M[j, i] = 1 iff row j satisfies every condition of
    rule i; flagged[j] marks rows with a missing value in some conditioned
    feature (their memberships are computed with missing comparisons false,
    not silently trusted)."""
    X = check_matrix(X, "X", allow_nan=True)
    feature_names = tuple(feature_names)
    col = {f: j for j, f in enumerate(feature_names)}
    for f in rs.condition_features():
        if f not in col:
            raise UnknownFeatureError(f"rule condition feature {f!r} not in feature names")
    n = len(X)
    M = np.ones((n, len(rs.rules)), dtype=np.int8)
    flagged = np.zeros(n, dtype=bool)
    for f in rs.condition_features():
        flagged |= np.isnan(X[:, col[f]])
    for i, r in enumerate(rs.rules):
        mask = np.ones(n, dtype=bool)
        for c in r.conditions:
            v = X[:, col[c.feature]]
            with np.errstate(invalid="ignore"):
                ok = v <= c.threshold if c.op == OP_LE else v > c.threshold
            ok &= ~np.isnan(v)
            mask &= ok
        M[:, i] = mask.astype(np.int8)
    return M, flagged


# -- edits ------------------------------------------------------------------


@dataclass(frozen=True)
class ModifyThreshold:
    feature: str
    new_threshold: float
    op: str | None = None

    def to_json_dict(self):
        d = {"kind": "modify-threshold", "feature": self.feature, "threshold": float(self.new_threshold)}
        if self.op is not None:
            d["op"] = self.op
        return d


@dataclass(frozen=True)
class AddCondition:
    condition: Condition

    def to_json_dict(self):
        return {"kind": "add-condition", "condition": self.condition.to_json_dict()}


@dataclass(frozen=True)
class RemoveCondition:
    feature: str
    op: str

    def to_json_dict(self):
        return {"kind": "remove-condition", "feature": self.feature, "op": self.op}


@dataclass(frozen=True)
class SetModel:
    model: NodeModel

    def to_json_dict(self):
        return {
            "kind": "set-model",
            "model": {"beta0": float(self.model.beta0), "beta1": [float(b) for b in self.model.beta1]},
        }


def _operation_from_json(d: dict):
    kind = d.get("kind")
    if kind == "modify-threshold":
        return ModifyThreshold(d["feature"], float(d["threshold"]), d.get("op"))
    if kind == "add-condition":
        return AddCondition(Condition.from_json_dict(d["condition"]))
    if kind == "remove-condition":
        return RemoveCondition(d["feature"], d["op"])
    if kind == "set-model":
        return SetModel(NodeModel(float(d["model"]["beta0"]), tuple(float(b) for b in d["model"]["beta1"])))
    raise RuleError(f"unknown edit operation kind {kind!r}")


@dataclass(frozen=True)
class RuleEdit:
    rule_id: int
    operations: tuple
    author: str
    timestamp: str

    def __post_init__(self):
        object.__setattr__(self, "operations", tuple(self.operations))

    def to_json_dict(self) -> dict:
        return {
            "rule_id": int(self.rule_id),
            "operations": [op.to_json_dict() for op in self.operations],
            "author": self.author,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RuleEdit":
        return cls(
            rule_id=int(d["rule_id"]),
            operations=tuple(_operation_from_json(o) for o in d["operations"]),
            author=d.get("author", ""),
            timestamp=d.get("timestamp", ""),
        )


@dataclass(frozen=True)
class EditReport:
    rule: Rule
    satisfiable: bool
    notes: tuple = ()


@dataclass(frozen=True)
class EditOutcome:
    rule_set: RuleSet
    report: EditReport


def _apply_operations(rule: Rule, operations, feature_names=None) -> Rule:
    conds = list(rule.conditions)
    model = rule.model
    known = set(feature_names) if feature_names is not None else None

    def check_feature(f):
        if known is not None and f not in known:
            raise UnknownFeatureError(f"unknown feature {f!r}")

    for op in operations:
        if isinstance(op, ModifyThreshold):
            check_feature(op.feature)
            hits = [
                i
                for i, c in enumerate(conds)
                if c.feature == op.feature and (op.op is None or c.op == op.op)
            ]
            if not hits:
                raise RuleError(f"rule {rule.id} has no condition on {op.feature!r} to modify")
            if len(hits) > 1:
                raise RuleError(
                    f"rule {rule.id} has several conditions on {op.feature!r}; give op too"
                )
            i = hits[0]
            conds[i] = Condition(conds[i].feature, conds[i].op, float(op.new_threshold))
        elif isinstance(op, AddCondition):
            check_feature(op.condition.feature)
            conds.append(op.condition)
        elif isinstance(op, RemoveCondition):
            hits = [i for i, c in enumerate(conds) if c.feature == op.feature and c.op == op.op]
            if not hits:
                raise RuleError(
                    f"rule {rule.id} has no condition ({op.feature!r}, {op.op!r}) to remove"
                )
            del conds[hits[0]]
        elif isinstance(op, SetModel):
            model = op.model
        else:
            raise RuleError(f"unknown edit operation {op!r}")
    return replace(rule, conditions=_collapse(conds), model=model, provenance="edited")


def apply_edit(rs: RuleSet, edit: RuleEdit, feature_names=None) -> EditOutcome:
    """Pure application of an edit: returns a new RuleSet (input untouched);
    the touched rule gets provenance 'edited'. An empty operations list is
    the identity. Raises on unknown rules/features/conditions and when the
    edited conjunction is unsatisfiable."""
    original = rs.rule(edit.rule_id)
    if not edit.operations:
        return EditOutcome(rule_set=rs, report=EditReport(rule=original, satisfiable=True))
    edited = _apply_operations(original, edit.operations, feature_names)
    if not satisfiable(edited.conditions):
        raise UnsatisfiableRuleError(
            f"edit leaves rule {edit.rule_id} with an empty region"
        )
    new_rules = tuple(edited if r.id == edit.rule_id else r for r in rs.rules)
    outcome = RuleSet(rules=new_rules, version=rs.version, regressors=rs.regressors)
    return EditOutcome(rule_set=outcome, report=EditReport(rule=edited, satisfiable=True))


# -- validation -------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    overlaps: tuple
    gap_count: int
    unsatisfiable: tuple
    n_checked: int
    flagged_count: int = 0

    @property
    def clean(self) -> bool:
        return not self.overlaps and self.gap_count == 0 and not self.unsatisfiable

    def to_json_dict(self) -> dict:
        return {
            "overlaps": [list(p) for p in self.overlaps],
            "gap_count": int(self.gap_count),
            "unsatisfiable": list(self.unsatisfiable),
            "n_checked": int(self.n_checked),
            "flagged_count": int(self.flagged_count),
            "clean": self.clean,
        }


def validate(
    rs: RuleSet,
    X=None,
    feature_names=None,
    *,
    ranges=None,
    n: int = 1000,
    seed: int = 0,
) -> ValidationReport:
    """Monte-Carlo partition check over a supplied sample or one generated
    uniformly from ranges (ordered (name, (lo, hi)) pairs)."""
    if X is None:
        if ranges is None:
            raise RuleError("validate needs a sample X or ranges to generate one")
        names = tuple(nm for nm, _ in ranges)
        lows = np.array([lo for _, (lo, _) in ranges], dtype=float)
        highs = np.array([hi for _, (_, hi) in ranges], dtype=float)
        rng = check_rng(seed)
        X = rng.uniform(lows, highs, size=(n, len(names)))
        feature_names = names
    if feature_names is None:
        raise RuleError("feature_names is required with an explicit sample")
    M, flagged = encode(rs, X, feature_names)
    Mv = M[~flagged].astype(bool)
    overlaps = []
    for a in range(len(rs.rules)):
        for b in range(a + 1, len(rs.rules)):
            if np.any(Mv[:, a] & Mv[:, b]):
                overlaps.append((rs.rules[a].id, rs.rules[b].id))
    gap_count = int(np.sum(Mv.sum(axis=1) == 0))
    unsat = tuple(r.id for r in rs.rules if not satisfiable(r.conditions))
    return ValidationReport(
        overlaps=tuple(overlaps),
        gap_count=gap_count,
        unsatisfiable=unsat,
        n_checked=int(Mv.shape[0]),
        flagged_count=int(flagged.sum()),
    )


# -- synthetic sampling -------------------------------------------------------

_MIN_ACCEPT_RATE = 1e-4


def sample_from_rule(
    rule: Rule,
    ranges,
    n: int,
    noise_sd: float = 0.0,
    seed: int = 0,
    *,
    regressors=(),
    target_name: str = "target",
    weight: float = 1.0,
    start_date=None,
):
    """Rejection-sample n visits uniformly from the rule's region.

    ranges is the ordered (feature-name, (lo, hi)) domain; targets are the
    rule model evaluated at the sampled regressors plus Normal(0, noise_sd);
    rows carry a synthetic provenance marker and the given weight.
    Acceptance below 1e-4 raises InfeasibleRegionError.
    """
    import datetime

    from .dataset import VisitRecord

    if n < 1:
        raise RuleError("n must be >= 1")
    if not satisfiable(rule.conditions):
        raise InfeasibleRegionError(f"rule {rule.id} has an empty region")
    names = tuple(nm for nm, _ in ranges)
    col = {f: j for j, f in enumerate(names)}
    for c in rule.conditions:
        if c.feature not in col:
            raise UnknownFeatureError(f"rule condition feature {c.feature!r} not in ranges")
    for f in regressors:
        if f not in col:
            raise UnknownFeatureError(f"regressor {f!r} not in ranges")
    lows = np.array([lo for _, (lo, _) in ranges], dtype=float)
    highs = np.array([hi for _, (_, hi) in ranges], dtype=float)
    rng = check_rng(seed)

    accepted = []
    proposed = 0
    max_proposals = max(int(math.ceil(n / _MIN_ACCEPT_RATE)), 10000)
    chunk = max(4 * n, 1024)
    while sum(len(a) for a in accepted) < n:
        if proposed >= max_proposals:
            raise InfeasibleRegionError(
                f"rule {rule.id}: acceptance rate below {_MIN_ACCEPT_RATE} "
                f"({sum(len(a) for a in accepted)}/{proposed} accepted)"
            )
        batch = rng.uniform(lows, highs, size=(chunk, len(names)))
        proposed += chunk
        keep = np.ones(chunk, dtype=bool)
        for c in rule.conditions:
            v = batch[:, col[c.feature]]
            keep &= v <= c.threshold if c.op == OP_LE else v > c.threshold
        accepted.append(batch[keep])
    pts = np.vstack(accepted)[:n]

    R = pts[:, [col[f] for f in regressors]] if regressors else np.empty((n, 0))
    mu = rule.model.predict(R) if len(rule.model.beta1) else np.full(n, rule.model.beta0)
    targets = mu + rng.normal(0.0, noise_sd, size=n)

    base = start_date if start_date is not None else datetime.date(2000, 1, 1)
    records = []
    for i in range(n):
        records.append(
            VisitRecord(
                patient_id=f"synthetic/rule{rule.id}/s{seed}/{i:05d}",
                care_date=base + datetime.timedelta(days=i),
                features={f: float(pts[i, j]) for j, f in enumerate(names)},
                target=float(targets[i]),
                weight=float(weight),
                source="synthetic-rule",
            )
        )
    return records


def _term(coef: float, name: str) -> str:
    sign = "+" if coef >= 0 else "-"
    return f" {sign} {abs(coef):.7g} * {name}"


def rule_to_text(rule: Rule, regressors=(), target_label: str = "target") -> str:
    """Expert-facing rendering: IF cond1 AND ... THEN target = b0 + b1 * dose."""
    if rule.conditions:
        conds = " AND ".join(
            f"{c.feature} {'<=' if c.op == OP_LE else '>'} {c.threshold:g}"
            for c in rule.conditions
        )
    else:
        conds = "TRUE"
    body = f"{rule.model.beta0:.7g}"
    for coef, name in zip(rule.model.beta1, regressors):
        body += _term(coef, name)
    return f"RULE #{rule.id}: IF {conds} THEN {target_label} = {body}"

"""Save fitted models to plain-JSON directories and load them back as
lightweight predictors.

Layout: every model directory has meta.json naming the kind, the feature
schema and the fit parameters; the model payload sits next to it
(tree.json, forest.json, lmm.json, or members.json + variances.json).
"""

from __future__ import annotations

import json
import os

import numpy as np

from .lmm import LmmFit
from .rules import RuleSet, extract_rules
from .tree import Forest, predict_tree, tree_from_json_dict, tree_to_json_dict

__all__ = ["PersistError", "save_model", "load_model", "LoadedModel"]

KINDS = ("cart", "forest", "lmm", "glmmtree", "bagged-glmmtree")


class PersistError(ValueError):
    pass


def _dump(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, ensure_ascii=False)
        fh.write("\n")


def _load(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_model(path, fitted, kind: str, *, feature_names, target_name="target", params=None):
    """Write a fitted model under `path` (created if missing)."""
    if kind not in KINDS:
        raise PersistError(f"unknown model kind {kind!r}")
    os.makedirs(path, exist_ok=True)
    meta = {
        "kind": kind,
        "feature_names": list(feature_names),
        "target_name": target_name,
        "params": dict(params or {}),
    }

    if kind == "cart":
        _dump(os.path.join(path, "tree.json"), tree_to_json_dict(fitted.tree_))
    elif kind == "forest":
        forest = fitted.forest_
        _dump(
            os.path.join(path, "forest.json"),
            {
                "n_trees": forest.n_trees,
                "mtry": forest.mtry,
                "bootstrap": forest.bootstrap,
                "seed": forest.seed,
                "trees": [tree_to_json_dict(t) for t in forest.trees],
            },
        )
    elif kind == "lmm":
        fit: LmmFit = fitted
        _dump(
            os.path.join(path, "lmm.json"),
            {
                "feature_names": list(fit.feature_names),
                "beta": [float(b) for b in fit.beta],
                "sigma2": fit.sigma2,
                "sigma_b2": fit.sigma_b2,
                "theta": fit.theta,
                "loglik": fit.loglik,
                "criterion": fit.criterion,
                "b_hat": {k: fit.b_hat[k] for k in sorted(fit.b_hat)},
                "flags": list(fit.flags),
            },
        )
    elif kind == "glmmtree":
        meta["regressors"] = list(fitted.regressors_)
        meta["partitioners"] = list(fitted.partitioners_)
        _dump(os.path.join(path, "tree.json"), tree_to_json_dict(fitted.tree_))
        _dump(
            os.path.join(path, "variances.json"),
            {
                "sigma2": fitted.sigma2_,
                "sigma_b2": fitted.sigma_b2_,
                "b_hat": {k: fitted.b_hat_[k] for k in sorted(fitted.b_hat_)},
            },
        )
        with open(os.path.join(path, "rules.json"), "w", encoding="utf-8") as fh:
            fh.write(fitted.rule_set().to_json(indent=2) + "\n")
    elif kind == "bagged-glmmtree":
        meta["regressors"] = list(fitted.members_[0].regressors_)
        meta["partitioners"] = list(fitted.members_[0].partitioners_)
        members = []
        for member, b_map in zip(fitted.members_, fitted.member_b_):
            members.append(
                {
                    "tree": tree_to_json_dict(member.tree_),
                    "sigma2": member.sigma2_,
                    "sigma_b2": member.sigma_b2_,
                    "b_hat": {k: b_map[k] for k in sorted(b_map)},
                }
            )
        _dump(os.path.join(path, "members.json"), {"members": members})

    _dump(os.path.join(path, "meta.json"), meta)
    return path


class LoadedModel:
    """Uniform predict() over a reloaded model directory."""

    def __init__(self, kind, meta, *, tree=None, forest=None, lmm=None, members=None, variances=None):
        self.kind = kind
        self.meta = meta
        self.feature_names = tuple(meta["feature_names"])
        self.tree = tree
        self.forest = forest
        self.lmm = lmm
        self.members = members
        self.variances = variances or {}

    def _split_columns(self):
        regressors = tuple(self.meta.get("regressors", ()))
        partitioners = tuple(self.meta.get("partitioners", ()))
        reg_idx = [self.feature_names.index(r) for r in regressors]
        part_idx = [self.feature_names.index(p) for p in partitioners]
        return reg_idx, part_idx

    def predict(self, X, clusters=None, mode: str = "marginal") -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if self.kind == "cart":
            return predict_tree(self.tree, X)
        if self.kind == "forest":
            preds = [predict_tree(t, X) for t in self.forest.trees]
            return np.stack(preds).mean(axis=0)
        if self.kind == "lmm":
            beta = np.asarray(self.lmm["beta"])
            names = self.lmm["feature_names"]
            if names and names[0] == "intercept":
                cols = [self.feature_names.index(f) for f in names[1:]]
                pred = beta[0] + X[:, cols] @ beta[1:]
            else:
                cols = [self.feature_names.index(f) for f in names]
                pred = X[:, cols] @ beta
            if mode == "conditional" and clusters is not None:
                b = self.lmm["b_hat"]
                pred = pred + np.array([b.get(str(c), 0.0) for c in clusters])
            return pred
        if self.kind == "glmmtree":
            reg_idx, part_idx = self._split_columns()
            pred = predict_tree(self.tree, X[:, part_idx], X[:, reg_idx])
            if mode == "conditional" and clusters is not None:
                b = self.variances.get("b_hat", {})
                pred = pred + np.array([b.get(str(c), 0.0) for c in clusters])
            return pred
        if self.kind == "bagged-glmmtree":
            reg_idx, part_idx = self._split_columns()
            preds = []
            for m in self.members:
                p = predict_tree(m["tree"], X[:, part_idx], X[:, reg_idx])
                if mode == "conditional" and clusters is not None:
                    b = m["b_hat"]
                    p = p + np.array([b.get(str(c), 0.0) for c in clusters])
                preds.append(p)
            return np.stack(preds).mean(axis=0)
        raise PersistError(f"unknown model kind {self.kind!r}")

    def rule_set(self, version: int = 0) -> RuleSet:
        if self.kind == "glmmtree":
            regressors = tuple(self.meta.get("regressors", ()))
            partitioners = tuple(self.meta.get("partitioners", ()))
            return extract_rules(self.tree, partitioners, regressors=regressors, version=version)
        if self.kind == "cart":
            return extract_rules(self.tree, self.feature_names, regressors=(), version=version)
        raise PersistError(f"model kind {self.kind!r} has no canonical rule set")


def load_model(path) -> LoadedModel:
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise PersistError(f"{path} is not a model directory (no meta.json)")
    meta = _load(meta_path)
    kind = meta.get("kind")
    if kind == "cart":
        return LoadedModel(kind, meta, tree=tree_from_json_dict(_load(os.path.join(path, "tree.json"))))
    if kind == "forest":
        raw = _load(os.path.join(path, "forest.json"))
        forest = Forest(
            trees=tuple(tree_from_json_dict(t) for t in raw["trees"]),
            n_trees=int(raw["n_trees"]),
            mtry=raw["mtry"],
            bootstrap=bool(raw["bootstrap"]),
            seed=int(raw["seed"]),
        )
        return LoadedModel(kind, meta, forest=forest)
    if kind == "lmm":
        return LoadedModel(kind, meta, lmm=_load(os.path.join(path, "lmm.json")))
    if kind == "glmmtree":
        return LoadedModel(
            kind,
            meta,
            tree=tree_from_json_dict(_load(os.path.join(path, "tree.json"))),
            variances=_load(os.path.join(path, "variances.json")),
        )
    if kind == "bagged-glmmtree":
        raw = _load(os.path.join(path, "members.json"))
        members = [
            {
                "tree": tree_from_json_dict(m["tree"]),
                "sigma2": float(m["sigma2"]),
                "sigma_b2": float(m["sigma_b2"]),
                "b_hat": {k: float(v) for k, v in m["b_hat"].items()},
            }
            for m in raw["members"]
        ]
        return LoadedModel(kind, meta, members=members)
    raise PersistError(f"unknown model kind {kind!r}")

"""Operator command line: data generation, training, evaluation, rule
management, agreement checks, closed-loop runs, and the HTTP service.

Every subcommand accepts --seed, --config (a JSON file of argument
defaults) and --json (machine-readable stdout). Errors from any module
exit non-zero with a message on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .agreement import agreement_result, load_ratings_csv, reliability_gate
from .dataset import Dataset, load_csv, write_csv
from .glmmtree import fit_bagged_glmm_tree, fit_glmm_tree
from .lmm import fit_lmm
from .loop import (
    LoopConfig,
    MergePolicy,
    OracleExpert,
    evaluate,
    load_snapshot,
    misspecified_scenario,
    replay,
    run_loop,
    snapshot_versions,
)
from .persist import load_model, save_model
from .rules import RuleEdit, RuleSet, apply_edit, validate
from .synthetic import (
    generate_synthetic,
    graded_truth,
    misspecified_pair,
    three_leaf_truth,
    two_leaf_truth,
)
from .tree import CartRegressor, ForestRegressor

__all__ = ["main", "build_parser"]


def _echo(result: dict, args, human_lines=None) -> None:
    if getattr(args, "json", False):
        print(json.dumps(result, indent=2, ensure_ascii=False))
        return
    if human_lines:
        for line in human_lines:
            print(line)
    else:
        for k, v in result.items():
            print(f"{k}: {v}")


def _infer_schema(path, target: str):
    """Feature columns = header minus the reserved/target/weight names."""
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    drop = {"ID", "Care_Date", "Weight", target}
    return tuple(h.strip() for h in header if h.strip() not in drop)


def _load_dataset(path, target: str) -> Dataset:
    return load_csv(path, _infer_schema(path, target), target)


def _csv_list(text):
    return tuple(s.strip() for s in str(text).split(",") if s.strip() != "")


# -- subcommand implementations ----------------------------------------------


def cmd_generate_data(args) -> int:
    seed = args.seed
    if args.truth == "two-leaf":
        truths = [(two_leaf_truth(n_clusters=args.n_clusters or 120,
                                  visits_per_cluster=args.visits or 20), args.out, seed)]
    elif args.truth == "three-leaf":
        truths = [(three_leaf_truth(n_clusters=args.n_clusters or 300,
                                    visits_per_cluster=args.visits or 30), args.out, seed)]
    elif args.truth == "graded":
        truths = [(graded_truth(n_clusters=args.n_clusters or 120,
                                visits_per_cluster=args.visits or 8), args.out, seed)]
    elif args.truth == "misspecified":
        corrupt, clean = misspecified_pair(
            n_clusters=args.n_clusters or 120, visits_per_cluster=args.visits or 20
        )
        if not args.test_out:
            raise ValueError("--truth misspecified needs --test-out for the clean cohort")
        truths = [(corrupt, args.out, seed), (clean, args.test_out, seed + 1)]
    else:
        raise ValueError(f"unknown truth {args.truth!r}")
    written = []
    for truth, out, s in truths:
        d, _ = generate_synthetic(truth, seed=s)
        write_csv(d, out)
        written.append({"out": out, "n_records": d.n_records, "n_patients": d.n_patients,
                        "seed": s})
    _echo({"written": written}, args,
          [f"wrote {w['out']}: {w['n_records']} records, {w['n_patients']} patients"
           for w in written])
    return 0


def cmd_train(args) -> int:
    d = _load_dataset(args.data, args.target)
    mask = np.isfinite(d.target)
    params: dict = {"seed": args.seed}
    summary: dict = {}
    if args.model == "cart":
        est = CartRegressor(
            min_node_size=args.min_node_size, max_depth=args.max_depth, cp=args.cp
        ).fit(d.X[mask], d.target[mask], sample_weight=d.weights[mask])
        save_model(args.out, est, "cart", feature_names=d.schema, target_name=d.target_name,
                   params={"min_node_size": args.min_node_size, "max_depth": args.max_depth,
                           "cp": args.cp})
        summary = {"n_leaves": est.tree_.n_leaves(), "depth": est.tree_.depth()}
    elif args.model == "forest":
        est = ForestRegressor(
            n_trees=args.n_trees, min_node_size=args.min_node_size, max_depth=args.max_depth,
            cp=args.cp, bootstrap=not args.no_bootstrap, random_state=args.seed,
        ).fit(d.X[mask], d.target[mask], sample_weight=d.weights[mask])
        save_model(args.out, est, "forest", feature_names=d.schema, target_name=d.target_name,
                   params={"n_trees": args.n_trees, "min_node_size": args.min_node_size,
                           "max_depth": args.max_depth, "cp": args.cp,
                           "bootstrap": not args.no_bootstrap, "seed": args.seed})
        summary = {"n_trees": args.n_trees}
    elif args.model == "lmm":
        design = np.column_stack([np.ones(int(mask.sum())), d.X[mask]])
        fit = fit_lmm(
            design, d.target[mask], d.patient_ids[mask], weights=d.weights[mask],
            criterion=args.criterion, feature_names=("intercept",) + d.schema,
        )
        save_model(args.out, fit, "lmm", feature_names=d.schema, target_name=d.target_name,
                   params={"criterion": args.criterion})
        summary = {"sigma2": fit.sigma2, "sigma_b2": fit.sigma_b2, "loglik": fit.loglik}
    elif args.model in ("glmmtree", "bagged-glmmtree"):
        common = dict(
            regressors=_csv_list(args.regressors),
            partitioners=None if args.partitioners is None else _csv_list(args.partitioners),
            min_node_size=args.min_node_size, max_depth=args.max_depth,
            alpha_split=args.alpha_split, max_iter=args.max_iter, criterion=args.criterion,
        )
        if args.model == "glmmtree":
            est = fit_glmm_tree(d, **common)
            save_model(args.out, est, "glmmtree", feature_names=d.schema,
                       target_name=d.target_name, params=dict(common, seed=args.seed,
                       partitioners=list(common["partitioners"] or [])))
            summary = {"n_leaves": est.tree_.n_leaves(), "sigma2": est.sigma2_,
                       "sigma_b2": est.sigma_b2_, "converged": est.converged_}
        else:
            est = fit_bagged_glmm_tree(
                d, n_trees=args.n_trees, bootstrap=not args.no_bootstrap,
                random_state=args.seed, **common,
            )
            save_model(args.out, est, "bagged-glmmtree", feature_names=d.schema,
                       target_name=d.target_name,
                       params=dict(common, n_trees=args.n_trees, seed=args.seed,
                                   partitioners=list(common["partitioners"] or [])))
            summary = {"n_trees": args.n_trees}
    else:
        raise ValueError(f"unknown model {args.model!r}")
    result = {"model": args.model, "out": args.out, "n_records": int(mask.sum()), **summary}
    _echo(result, args)
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model_dir)
    d = _load_dataset(args.data, args.target)
    mask = np.isfinite(d.target)
    clusters = d.patient_ids[mask] if args.mode == "conditional" else None
    pred = model.predict(d.X[mask], clusters=clusters, mode=args.mode)
    metrics = evaluate(pred, d.target[mask], split=args.split_label)
    _echo(metrics.to_json_dict(), args,
          [f"{metrics.split or 'eval'}: mae={metrics.mae:.6g} rmse={metrics.rmse:.6g} "
           f"n={metrics.n}"])
    return 0


def cmd_rules_export(args) -> int:
    model = load_model(args.model_dir)
    rs = model.rule_set(version=args.version)
    text = rs.to_json(indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        _echo({"out": args.out, "n_rules": len(rs.rules)}, args)
    else:
        print(text, end="")
    return 0


def cmd_rules_edit(args) -> int:
    with open(args.rules, encoding="utf-8") as fh:
        rs = RuleSet.from_json(fh.read())
    with open(args.edit, encoding="utf-8") as fh:
        edit = RuleEdit.from_json_dict(json.load(fh))
    outcome = apply_edit(rs, edit)
    out = args.out or args.rules
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(outcome.rule_set.to_json(indent=2) + "\n")
    _echo(
        {"out": out, "rule_id": edit.rule_id, "satisfiable": outcome.report.satisfiable,
         "rule": outcome.report.rule.to_json_dict()},
        args,
        [f"edited rule #{edit.rule_id} -> {out}"],
    )
    return 0


def cmd_rules_validate(args) -> int:
    with open(args.rules, encoding="utf-8") as fh:
        rs = RuleSet.from_json(fh.read())
    if args.data:
        d = _load_dataset(args.data, args.target)
        report = validate(rs, d.X, d.schema)
    else:
        raise ValueError("rules validate needs --data to check membership against")
    _echo(report.to_json_dict(), args,
          [f"clean: {report.clean} (overlaps={len(report.overlaps)}, "
           f"gaps={report.gap_count}, unsatisfiable={list(report.unsatisfiable)})"])
    return 0 if report.clean else 1


def cmd_agreement_compute(args) -> int:
    m = load_ratings_csv(args.ratings)
    res = agreement_result(m, B=args.bootstrap, level=args.level, seed=args.seed)
    gate = reliability_gate(m, threshold=args.threshold, B=args.bootstrap,
                            level=args.level, seed=args.seed)
    out = res.to_json_dict()
    out["gate_passed"] = gate.passed
    out["threshold"] = args.threshold
    _echo(out, args,
          [f"alpha={res.alpha:.6g} ci=({res.ci[0]:.4g}, {res.ci[1]:.4g}) "
           f"gate_passed={gate.passed}"])
    return 0


def _scenario_from_args(args):
    return misspecified_scenario(
        seed=args.seed,
        advice_weight=args.advice_weight,
    )


def cmd_loop_run(args) -> int:
    if args.expert == "oracle":
        scenario = _scenario_from_args(args)
        expert = OracleExpert(truth=scenario.truth, noise_sd=args.noise_sd, seed=args.seed)
        states, pool = run_loop(
            scenario.train,
            scenario.test,
            scenario.config,
            expert,
            iterations=args.iterations,
            snapshot_dir=args.snapshot_dir,
            batch_size=args.batch_size,
        )
        history = [vm.to_json_dict() for vm in states[-1].history]
        test_mae = [vm.test.mae for vm in states[-1].history if vm.test is not None]
        result = {
            "expert": "oracle",
            "iterations": args.iterations,
            "snapshot_dir": args.snapshot_dir,
            "test_mae": test_mae,
            "history": history,
            "n_records": len(pool.records),
        }
        lines = [
            f"v{vm.version}: train_mae={vm.train.mae:.4f} test_mae={vm.test.mae:.4f}"
            for vm in states[-1].history if vm.train is not None and vm.test is not None
        ]
        _echo(result, args, lines)
        return 0
    if args.expert == "server":
        if not args.url:
            raise ValueError("--expert server needs --url of a running service")
        import urllib.request

        histories = []
        for _ in range(args.iterations):
            req = urllib.request.Request(
                args.url.rstrip("/") + "/api/v1/loop/iterate", method="POST"
            )
            if args.token:
                req.add_header("Authorization", f"Bearer {args.token}")
            with urllib.request.urlopen(req) as resp:
                histories.append(json.loads(resp.read().decode("utf-8")))
        _echo({"expert": "server", "iterations": args.iterations, "responses": histories},
              args, [f"ran {args.iterations} iterations against {args.url}"])
        return 0
    raise ValueError(f"unknown expert {args.expert!r}")


def cmd_loop_replay(args) -> int:
    versions = snapshot_versions(args.snapshot_dir)
    if not versions:
        raise ValueError(f"no snapshots under {args.snapshot_dir}")
    if args.data:
        train = _load_dataset(args.data, args.target)
        test = _load_dataset(args.test, args.target) if args.test else None
    else:
        state0, _ = load_snapshot(args.snapshot_dir, versions[0])
        scenario = misspecified_scenario(
            seed=state0.config.seed,
            advice_weight=state0.config.policy.advice_weight,
        )
        train, test = scenario.train, scenario.test
    result = replay(args.snapshot_dir, train, test)
    _echo(result.to_json_dict(), args,
          [f"replayed versions {list(result.versions)}: "
           + ("bit-identical" if result.identical else f"MISMATCH {list(result.mismatches)}")])
    return 0 if result.identical else 1


def cmd_serve(args) -> int:
    from .server import LoopService, serve

    if args.data:
        train = _load_dataset(args.data, args.target)
        test = _load_dataset(args.test, args.target) if args.test else None
        config = LoopConfig(
            regressors=_csv_list(args.regressors),
            seed=args.seed,
            policy=MergePolicy(seed=args.seed),
        )
    else:
        scenario = _scenario_from_args(args)
        train, test, config = scenario.train, scenario.test, scenario.config
    service = LoopService(train, test=test, config=config, snapshot_dir=args.snapshot_dir)
    print(f"serving model v{service.version} on {args.host}:{args.port}", file=sys.stderr)
    serve(service, host=args.host, port=args.port, token=args.token)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--config", help="JSON file of argument defaults")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")

    parser = argparse.ArgumentParser(
        prog="doseloop",
        description="Rule-learning dosing models with an expert-in-the-loop.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    leaves = []

    p = sub.add_parser("generate-data", parents=[common], help="write a synthetic cohort CSV")
    p.add_argument("--truth", choices=["two-leaf", "three-leaf", "graded", "misspecified"],
                   default="two-leaf")
    p.add_argument("--out", required=True)
    p.add_argument("--test-out", help="clean-cohort CSV (misspecified truth only)")
    p.add_argument("--n-clusters", type=int)
    p.add_argument("--visits", type=int)
    p.set_defaults(func=cmd_generate_data)
    leaves.append(p)

    p = sub.add_parser("train", parents=[common], help="fit a model and save it")
    p.add_argument("--model", required=True,
                   choices=["cart", "forest", "lmm", "glmmtree", "bagged-glmmtree"])
    p.add_argument("--data", required=True)
    p.add_argument("--target", default="delta_Hb")
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--regressors", default="EPO_DOSE")
    p.add_argument("--partitioners", default=None)
    p.add_argument("--min-node-size", type=int, default=20)
    p.add_argument("--max-depth", type=int, default=10)
    p.add_argument("--cp", type=float, default=0.001)
    p.add_argument("--alpha-split", type=float, default=0.05)
    p.add_argument("--max-iter", type=int, default=10)
    p.add_argument("--criterion", choices=["REML", "ML"], default="REML")
    p.add_argument("--n-trees", type=int, default=25)
    p.add_argument("--no-bootstrap", action="store_true")
    p.set_defaults(func=cmd_train)
    leaves.append(p)

    p = sub.add_parser("evaluate", parents=[common], help="score a saved model on a CSV")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", default="delta_Hb")
    p.add_argument("--mode", choices=["marginal", "conditional"], default="marginal")
    p.add_argument("--split-label", default="")
    p.set_defaults(func=cmd_evaluate)
    leaves.append(p)

    p = sub.add_parser("rules", help="rule set operations")
    rsub = p.add_subparsers(dest="subcommand", required=True)
    q = rsub.add_parser("export", parents=[common], help="rules from a model directory")
    q.add_argument("--model-dir", required=True)
    q.add_argument("--out")
    q.add_argument("--version", type=int, default=0)
    q.set_defaults(func=cmd_rules_export)
    leaves.append(q)
    q = rsub.add_parser("edit", parents=[common], help="apply an edit file to a rules file")
    q.add_argument("--rules", required=True)
    q.add_argument("--edit", required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_rules_edit)
    leaves.append(q)
    q = rsub.add_parser("validate", parents=[common], help="partition checks for a rules file")
    q.add_argument("--rules", required=True)
    q.add_argument("--data")
    q.add_argument("--target", default="delta_Hb")
    q.set_defaults(func=cmd_rules_validate)
    leaves.append(q)

    p = sub.add_parser("agreement", help="inter-rater reliability")
    asub = p.add_subparsers(dest="subcommand", required=True)
    q = asub.add_parser("compute", parents=[common], help="alpha + bootstrap CI from a CSV")
    q.add_argument("--ratings", required=True, help="long CSV: unit_id,rater_id,value")
    q.add_argument("--threshold", type=float, default=0.667)
    q.add_argument("--bootstrap", type=int, default=1000)
    q.add_argument("--level", type=float, default=0.95)
    q.set_defaults(func=cmd_agreement_compute)
    leaves.append(q)

    p = sub.add_parser("loop", help="expert-in-the-loop runs")
    lsub = p.add_subparsers(dest="subcommand", required=True)
    q = lsub.add_parser("run", parents=[common], help="drive loop iterations")
    q.add_argument("--expert", choices=["oracle", "server"], required=True)
    q.add_argument("--iterations", type=int, default=3)
    q.add_argument("--snapshot-dir")
    q.add_argument("--batch-size", type=int, default=200)
    q.add_argument("--advice-weight", type=float, default=5.0)
    q.add_argument("--noise-sd", type=float, default=0.0)
    q.add_argument("--url", help="service base URL (server expert)")
    q.add_argument("--token")
    q.set_defaults(func=cmd_loop_run)
    leaves.append(q)
    q = lsub.add_parser("replay", parents=[common], help="re-run stored snapshots and compare")
    q.add_argument("--snapshot-dir", required=True)
    q.add_argument("--data")
    q.add_argument("--test")
    q.add_argument("--target", default="delta_Hb")
    q.set_defaults(func=cmd_loop_replay)
    leaves.append(q)

    p = sub.add_parser("serve", parents=[common], help="run the annotation HTTP service")
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--target", default="delta_Hb")
    p.add_argument("--regressors", default="EPO_DOSE")
    p.add_argument("--advice-weight", type=float, default=5.0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--token")
    p.add_argument("--snapshot-dir")
    p.set_defaults(func=cmd_serve)
    leaves.append(p)

    return parser, leaves


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser, leaves = build_parser()
    if known.config:
        with open(known.config, encoding="utf-8") as fh:
            defaults = json.load(fh)
        clean = {k.replace("-", "_"): v for k, v in defaults.items()}
        parser.set_defaults(**clean)
        for leaf in leaves:
            leaf.set_defaults(**clean)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # surface module errors as exit status + message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

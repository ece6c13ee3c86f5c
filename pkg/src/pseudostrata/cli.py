"""Command-line front end.

Every command reads an optional JSON configuration (``--config``); flags
given on the command line override it. Outputs go to ``--out`` and are
not overwritten without ``--force``. Exit status is 0 on success, 1 on a
fatal error (with ``error.json`` written to the output directory when
possible) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import LABELS, DatasetError, read_csv, validate_dataset, write_csv
from .decision import PseudoStrataPolicy, direct_policy_search, value_function
from .inference import (bootstrap, pipeline_estimator, sensitivity_sweep, write_json,
                        write_rows_csv)
from .pipeline import LoadedModel, PipelineConfig, fit_pipeline, pipeline_to_dict
from .simulation import (METHODS, SimulationConfig, failure_counts, format_table, generate,
                         run_experiment, summarize_estimands, summarize_methods)

CONFIG_KEYS = {"data", "model", "simulation", "pipeline", "experiment", "a_cols", "c_cols",
               "eta_grid", "methods", "boot", "seed", "out", "workers"}


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _csv_list(text, cast=str):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [cast(v) for v in text]
    return [cast(v.strip()) for v in str(text).split(",") if v.strip()]


def load_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(cfg) - CONFIG_KEYS
        if unknown:
            raise CLIError(f"unknown config keys {sorted(unknown)}")
    if "data" in cfg and "simulation" in cfg and args.command != "experiment":
        raise CLIError("config must give either a dataset path or a simulation block, not both")
    return cfg


def pipeline_config(args, cfg: dict) -> PipelineConfig:
    base = dict(cfg.get("pipeline", {}))
    for key, flag in (("eta", "eta"), ("family", "family"), ("strata_method", "strata"),
                      ("q_basis", "q_basis"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    if getattr(args, "identity_rewards", False):
        base["identity_rewards"] = True
    if "seed" not in base and "seed" in cfg:
        base["seed"] = cfg["seed"]
    try:
        return PipelineConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid pipeline configuration: {exc}") from None


def read_dataset(args, cfg: dict):
    path = args.data or cfg.get("data")
    if not path:
        raise CLIError("no dataset given (--data or config 'data')")
    a_cols = _csv_list(args.a_cols) if args.a_cols else cfg.get("a_cols")
    c_cols = _csv_list(args.c_cols) if args.c_cols else cfg.get("c_cols")
    d = read_csv(path, a_cols, c_cols)
    validate_dataset(d).raise_if_fatal()
    return d


def out_dir(args, cfg: dict) -> Path:
    out = Path(args.out or cfg.get("out") or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}") from None
    return out


def target(out: Path, name: str, force: bool) -> Path:
    p = out / name
    if p.exists() and not force:
        raise CLIError(f"{p} exists; pass --force to overwrite")
    return p


def _seed(args, cfg) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _workers(args, cfg) -> int:
    return int(args.workers if args.workers is not None else cfg.get("workers", 1))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg):
    sim = dict(cfg.get("simulation", {}))
    for key in ("n", "delta", "eta", "family"):
        v = getattr(args, key, None)
        if v is not None:
            sim[key] = v[0] if isinstance(v, list) else v
    if args.seed is not None or "seed" not in sim:
        sim["seed"] = _seed(args, cfg)
    try:
        sc = SimulationConfig.from_dict(sim)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid simulation config: {exc}") from None
    out = out_dir(args, cfg)
    labeled_path = target(out, "labeled.csv", args.force)
    observed_path = target(out, "observed.csv", args.force)
    ld = generate(sc, rep=0)
    g = np.array([str(LABELS[k]) for k in ld.g], dtype=object)
    write_csv(labeled_path, ld.data, {"g": g, "s0": ld.s0, "s1": ld.s1, "y0": ld.y0, "y1": ld.y1})
    write_csv(observed_path, ld.data)
    return {"labeled": str(labeled_path), "observed": str(observed_path), "rows": ld.n}


def cmd_fit(args, cfg):
    d = read_dataset(args, cfg)
    pc = pipeline_config(args, cfg)
    out = out_dir(args, cfg)
    model_path = target(out, "model.json", args.force)
    ident_path = target(out, "identification.json", args.force)
    fp = fit_pipeline(d, pc)
    model = pipeline_to_dict(fp)
    write_json(model, model_path)
    write_json({"sets": model["identification"],
                "condition_numbers": {k: v["condition_number"] for k, v in model["identification"].items()},
                "warnings": fp.outcome_fit.warnings}, ident_path)
    return {"model": str(model_path), "identification": str(ident_path)}


def _load_model(args, cfg, d) -> LoadedModel:
    path = args.model or cfg.get("model")
    if not path:
        raise CLIError("no model file given (--model)")
    try:
        lm = LoadedModel.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CLIError(f"cannot read model {path}: {exc}") from None
    lm.check(d)
    return lm


def cmd_classify(args, cfg):
    d = read_dataset(args, cfg)
    lm = _load_model(args, cfg, d)
    method = (args.method or "proposed")
    if method == "direct":
        raise CLIError("the direct method does not classify; use policy-eval")
    out = out_dir(args, cfg)
    csv_path = target(out, "classification.csv", args.force)
    json_path = target(out, "classification.json", args.force)
    rule = lm.rule(method, identity_rewards=args.identity_rewards)
    x = d.x
    pi = lm.strata.predict(x)
    h = rule.scores(x) if rule.source == "bayes" else pi
    labels = rule.classify(x)
    treat = PseudoStrataPolicy(rule, lm.outcome, lm.config.costs).treat(x)
    names = [str(g) for g in LABELS]
    rows = []
    for i in range(d.n):
        row = {"id": i}
        row.update({f"pi_{g}": float(pi[i, k]) for k, g in enumerate(names)})
        row.update({f"h_{g}": float(h[i, k]) for k, g in enumerate(names)})
        row["label"] = names[labels[i]]
        row["treat"] = int(treat[i])
        rows.append(row)
    cols = ["id"] + [f"pi_{g}" for g in names] + [f"h_{g}" for g in names] + ["label", "treat"]
    write_rows_csv(rows, csv_path, cols)
    rm = lm.rewards if rule.source == "bayes" and not args.identity_rewards else None
    summary = {"method": method, "identity_rewards": bool(args.identity_rewards), "rows": d.n,
               "label_shares": {g: float(np.mean(labels == k)) for k, g in enumerate(names)},
               "treated_share": float(np.mean(treat)),
               "reward_matrix": (rm.to_dict() if rm is not None else None)}
    write_json(summary, json_path)
    return {"classification": str(csv_path), "summary": str(json_path)}


def cmd_policy_eval(args, cfg):
    d = read_dataset(args, cfg)
    lm = _load_model(args, cfg, d)
    methods = [args.method] if args.method else list(cfg.get("methods", METHODS))
    out = out_dir(args, cfg)
    path = target(out, "policy.json", args.force)
    result = {"methods": {}, "observed_mean_revenue": float(np.mean(d.y))}
    for m in methods:
        if m == "direct":
            beta, ev = direct_policy_search(lm.strata, lm.outcome, lm.config.costs, d)
            entry = ev.to_dict()
            entry["beta"] = [float(b) for b in beta]
        else:
            entry = value_function(lm.policy(m), lm.strata, lm.outcome, lm.config.costs, d).to_dict()
        result["methods"][m] = entry
    write_json(result, path)
    return {"policy": str(path)}


def cmd_sensitivity(args, cfg):
    d = read_dataset(args, cfg)
    pc = pipeline_config(args, cfg)
    etas = _csv_list(args.eta_grid, float) if args.eta_grid else cfg.get("eta_grid")
    if not etas:
        etas = [pc.eta]
    methods = [args.method] if args.method else list(cfg.get("methods", ("proposed", "posterior")))
    out = out_dir(args, cfg)
    csv_path = target(out, "sensitivity.csv", args.force)
    json_path = target(out, "sensitivity.json", args.force)
    grid = sensitivity_sweep(d, etas, pc, methods=methods, workers=_workers(args, cfg))
    write_rows_csv(grid.tidy_rows(), csv_path, ["eta", "quantity", "value"])
    write_json({"etas": grid.etas, "results": grid.results, "errors": grid.errors}, json_path)
    return {"sensitivity": str(csv_path), "summary": str(json_path), "failed": len(grid.errors)}


def cmd_bootstrap(args, cfg):
    d = read_dataset(args, cfg)
    pc = pipeline_config(args, cfg)
    B = int(args.boot if args.boot is not None else cfg.get("boot", 200))
    out = out_dir(args, cfg)
    csv_path = target(out, "bootstrap.csv", args.force)
    json_path = target(out, "bootstrap.json", args.force)
    res = bootstrap(d, pipeline_estimator(pc), B=B, seed=_seed(args, cfg), workers=_workers(args, cfg))
    write_rows_csv(res.tidy_rows(), csv_path, ["replicate", "estimand", "value", "failed"])
    summary = res.summary()
    summary["eta"] = pc.eta
    summary["failures"] = {str(k): v for k, v in res.failures.items()}
    write_json(summary, json_path)
    return {"bootstrap": str(csv_path), "summary": str(json_path), "failed": res.n_failed}


def cmd_experiment(args, cfg):
    exp = dict(cfg.get("experiment", {}))
    sim = dict(cfg.get("simulation", {}))
    ns = args.n if args.n else exp.get("n", [sim.get("n", 2000)])
    deltas = args.delta_grid or exp.get("delta", [sim.get("delta", 0.0)])
    etas = (_csv_list(args.eta_grid, float) if args.eta_grid else None) or \
        ([args.eta] if args.eta is not None else exp.get("eta", [sim.get("eta", 0.0)]))
    family = args.family or exp.get("family", sim.get("family", "exp"))
    reps = int(args.reps if args.reps is not None else exp.get("reps", sim.get("reps", 50)))
    seed = _seed(args, cfg)
    methods = [args.method] if args.method else list(cfg.get("methods", METHODS))
    pc = pipeline_config(args, cfg)
    out = out_dir(args, cfg)
    csv_path = target(out, "experiment.csv", args.force)
    txt_path = target(out, "experiment_summary.txt", args.force)
    json_path = target(out, "experiment.json", args.force)
    configs = [SimulationConfig(n=int(n), delta=float(dl), eta=float(e), family=family, seed=seed, reps=reps)
               for dl in deltas for e in etas for n in ns]
    df = run_experiment(configs, methods, pc, workers=_workers(args, cfg))
    rows = df.to_dict("records")
    write_rows_csv(rows, csv_path, list(df.columns))
    text = format_table(df)
    meth = summarize_methods(df)
    if not meth.empty:
        text += "\nmedian accuracy / revenue ratio\n" + meth.to_string(index=False) + "\n"
    txt_path.write_text(text)
    write_json({"configs": [c.to_dict() for c in configs],
                "estimands": summarize_estimands(df).to_dict("records"),
                "methods": meth.to_dict("records"), "failures": failure_counts(df)}, json_path)
    return {"experiment": str(csv_path), "summary": str(txt_path)}


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "classify": cmd_classify,
            "policy-eval": cmd_policy_eval, "sensitivity": cmd_sensitivity,
            "bootstrap": cmd_bootstrap, "experiment": cmd_experiment}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--data", help="dataset CSV (z,s,y,a_*,c_*)")
    common.add_argument("--model", help="model.json written by 'fit'")
    common.add_argument("--a-cols", help="comma-separated A column names or indices")
    common.add_argument("--c-cols", help="comma-separated C column names or indices")
    common.add_argument("--eta", type=float, help="log odds ratio of the potential responses")
    common.add_argument("--eta-grid", help="comma-separated increasing eta values")
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--family", choices=("exp", "linear"))
    common.add_argument("--strata", choices=("em", "closed_form"), help="strata estimator")
    common.add_argument("--q-basis", choices=("exp", "identity", "constant"))
    common.add_argument("--identity-rewards", action="store_true",
                        help="classify with the identity reward matrix (posterior-mode cross-check)")
    common.add_argument("--seed", type=int)
    common.add_argument("--reps", type=int)
    common.add_argument("--boot", type=int, help="bootstrap resamples")
    common.add_argument("--n", type=lambda s: [int(v) for v in s.split(",")],
                        help="sample size (comma list for experiment)")
    common.add_argument("--delta", type=float, help="treatment-assignment coefficient")
    common.add_argument("--delta-grid", type=lambda s: [float(v) for v in s.split(",")])
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--workers", type=int, help="worker processes (default 1)")

    parser = argparse.ArgumentParser(prog="pseudostrata", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = {}
    try:
        cfg = load_config(args)
        info = COMMANDS[args.command](args, cfg)
    except (CLIError, DatasetError, ValueError, RuntimeError, OSError) as exc:
        msg = f"{args.command}: {exc}"
        print(f"error: {msg}", file=sys.stderr)
        _write_error(args, cfg, msg)
        return 1
    for k, v in info.items():
        print(f"{k}: {v}")
    return 0


def _write_error(args, cfg, msg):
    out = args.out or cfg.get("out")
    if not out:
        return
    try:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_json({"command": args.command, "error": msg}, Path(out) / "error.json")
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())

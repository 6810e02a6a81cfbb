"""Command-line entry point.

Subcommands: ``simulate`` (synthetic trial + ground-truth sidecar),
``analyze`` (run method ids on a trial CSV), ``replicate`` (bias/SE/coverage
study over simulated trials) and ``diagnose`` (rescue-threshold positivity
table). One YAML config file drives everything; each run writes the fully
resolved config, seed and package version next to its outputs so any result
file can be reproduced exactly. Timing is reported on stdout but kept out of
the result files, which are byte-stable for identical config and seed.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .data import (
    DEFAULT_SCHEDULE,
    VisitSchedule,
    positivity_diagnostics,
    read_trial_csv,
    write_trial_csv,
)
from .errors import (
    ConfigError,
    DuplicateRowError,
    IcefreeError,
    InvalidDataError,
    MonotonicityViolationError,
    SchemaError,
)
from .methods import REGISTRY, run_method
from .simulator import (
    SimScenario,
    default_scenario,
    fpg_confounded_scenario,
    null_scenario,
    run_replication_study,
    simulate_trial,
    unmeasured_confounding_scenario,
)

SCENARIO_BUILDERS = {
    "default": default_scenario,
    "null": null_scenario,
    "fpg_confounded": fpg_confounded_scenario,
    "unmeasured_confounding": unmeasured_confounding_scenario,
}

DATA_ERRORS = (SchemaError, InvalidDataError, MonotonicityViolationError, DuplicateRowError)


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    return cfg


def resolve_schedule(cfg):
    weeks = cfg.get("schedule", {}).get("weeks")
    if weeks is None:
        return DEFAULT_SCHEDULE
    try:
        return VisitSchedule(tuple(weeks))
    except IcefreeError as exc:
        raise ConfigError(f"bad schedule: {exc}")


def resolve_scenario(cfg, seed):
    sim_cfg = dict(cfg.get("simulate", {}))
    name = sim_cfg.pop("scenario", "default")
    if name not in SCENARIO_BUILDERS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIO_BUILDERS)}")
    overrides = dict(sim_cfg.pop("overrides", {}) or {})
    for key in ("n",):
        if key in sim_cfg:
            overrides[key] = sim_cfg.pop(key)
    if sim_cfg:
        raise ConfigError(f"unknown simulate keys: {sorted(sim_cfg)}")
    weeks = cfg.get("schedule", {}).get("weeks")
    if weeks is not None:
        overrides.setdefault("weeks", tuple(weeks))
    valid = {f.name for f in dataclasses.fields(SimScenario)}
    bad = set(overrides) - valid
    if bad:
        raise ConfigError(f"unknown scenario fields: {sorted(bad)}")
    overrides["seed"] = seed
    try:
        return SCENARIO_BUILDERS[name](**overrides)
    except TypeError as exc:
        raise ConfigError(f"bad scenario overrides: {exc}")


def analysis_options(cfg):
    a = dict(cfg.get("analysis", {}))
    methods = a.pop("methods", None)
    opts = {
        "m": int(a.pop("m", 100)),
        "b": int(a.pop("b", 100)),
        "iterations": int(a.pop("iterations", 5)),
        "copies": int(a.pop("copies", 10)),
        "gformula_b": int(a.pop("gformula_b", 500)),
        "truncation": a.pop("truncation", None),
        "stabilize": bool(a.pop("stabilize", False)),
        "deterministic": bool(a.pop("deterministic", False)),
    }
    ice_mode = a.pop("ice_mode", None)
    if a:
        raise ConfigError(f"unknown analysis keys: {sorted(a)}")
    if opts["truncation"] is not None:
        opts["truncation"] = float(opts["truncation"])
    return methods, opts, ice_mode


def check_methods(method_ids, ice_mode):
    for mid in method_ids:
        if not isinstance(mid, int) or mid not in REGISTRY:
            raise ConfigError(f"unknown method id {mid}")
        if ice_mode is not None and REGISTRY[mid].ice_mode not in (ice_mode, "none") \
                and REGISTRY[mid].ice_mode != ice_mode:
            raise ConfigError(
                f"method {mid} uses {REGISTRY[mid].ice_mode} event coding; "
                f"config requests {ice_mode}")
        if ice_mode is not None and REGISTRY[mid].ice_mode == "none" and ice_mode != "none":
            raise ConfigError(f"method {mid} has no event-coding choice; remove ice_mode")


def write_run_record(outdir, command, cfg, seed, extras=None):
    record = {
        "command": command,
        "config": cfg,
        "seed": seed,
        "version": __version__,
    }
    if extras:
        record.update(extras)
    path = Path(outdir) / "run.json"
    path.write_text(json.dumps(record, sort_keys=True, indent=2, default=str) + "\n")


def cmd_simulate(args):
    cfg = load_config(args.config)
    seed = int(cfg.get("seed", 0))
    scenario = resolve_scenario(cfg, seed)
    dataset, truth = simulate_trial(scenario)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_trial_csv(dataset, outdir / "trial.csv")
    truth_frame = pd.DataFrame({
        "id": dataset.frame["id"],
        "y_final_arm1": truth.y_final_arm1,
        "y_final_arm0": truth.y_final_arm0,
    })
    truth_frame.to_csv(outdir / "truth.csv", index=False)
    write_run_record(outdir, "simulate", cfg, seed,
                     {"scenario": dataclasses.asdict(scenario),
                      "estimand": truth.estimand})
    print(f"simulated {dataset.n} subjects, {dataset.K} visits -> {outdir}/trial.csv")
    print(f"true effect (event-free regime): {truth.estimand:.6f}")
    return 0


def cmd_analyze(args):
    cfg = load_config(args.config)
    seed = int(cfg.get("seed", 0))
    schedule = resolve_schedule(cfg)
    method_ids, opts, ice_mode = analysis_options(cfg)
    if args.methods:
        method_ids = [int(m) for m in args.methods.split(",")]
    if not method_ids:
        raise ConfigError("no methods requested (set analysis.methods or --methods)")
    check_methods(method_ids, ice_mode)
    dataset = read_trial_csv(args.data, schedule)
    rows = []
    for mid in method_ids:
        est = run_method(mid, dataset, seed=seed, **opts)
        rows.append({
            "method_id": mid,
            "label": REGISTRY[mid].label,
            "arm1_mean": est.arm1_mean, "arm1_se": est.arm1_se,
            "arm0_mean": est.arm0_mean, "arm0_se": est.arm0_se,
            "effect": est.effect, "effect_se": est.effect_se,
            "wall_time_s": est.wall_time_s,
        })
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame([{k: v for k, v in r.items() if k != "wall_time_s"} for r in rows])
    table.to_csv(outdir / "results.csv", index=False)
    payload = {
        "seed": seed, "version": __version__, "methods": method_ids,
        "options": {k: v for k, v in opts.items()},
        "results": [{k: v for k, v in r.items() if k != "wall_time_s"} for r in rows],
    }
    (outdir / "results.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n")
    write_run_record(outdir, "analyze", cfg, seed, {"data": str(args.data)})

    head = (f"{'No':>3} {'Method':<44} {'Arm 1 (SE)':>18} "
            f"{'Arm 0 (SE)':>18} {'Effect (SE)':>18} {'Minutes':>8}")
    print(head)
    print("-" * len(head))
    for r in rows:
        print(f"{r['method_id']:>3} {r['label']:<44} "
              f"{r['arm1_mean']:8.3f} ({r['arm1_se']:.4f}) "
              f"{r['arm0_mean']:8.3f} ({r['arm0_se']:.4f}) "
              f"{r['effect']:8.3f} ({r['effect_se']:.4f}) "
              f"{r['wall_time_s'] / 60:8.2f}")
    return 0


def cmd_replicate(args):
    cfg = load_config(args.config)
    seed = int(cfg.get("seed", 0))
    threads = int(cfg.get("threads", 1))
    rep_cfg = dict(cfg.get("replicate", {}))
    r = int(rep_cfg.pop("r", 100))
    methods = rep_cfg.pop("methods", list(range(1, 18)))
    scen_name = rep_cfg.pop("scenario", "default")
    n = rep_cfg.pop("n", None)
    overrides = dict(rep_cfg.pop("overrides", {}) or {})
    if rep_cfg:
        raise ConfigError(f"unknown replicate keys: {sorted(rep_cfg)}")
    if scen_name not in SCENARIO_BUILDERS:
        raise ConfigError(f"unknown scenario {scen_name!r}")
    if n is not None:
        overrides["n"] = int(n)
    scenario = SCENARIO_BUILDERS[scen_name](**overrides)
    _, opts, ice_mode = analysis_options(cfg)
    check_methods(methods, ice_mode)
    if cfg.get("analysis", {}).get("gformula_b") is None:
        # study runs default the standardization bootstrap to the shared B
        opts = {**opts, "gformula_b": opts["b"]}
    summary, raw = run_replication_study(
        scenario, methods, r=r, seed=seed, threads=threads, **opts)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    summary_out = summary.drop(columns=["mean_wall_time_s"])
    summary_out.to_csv(outdir / "study.csv", index=False)
    raw.drop(columns=["wall_time_s"]).to_csv(outdir / "study_raw.csv", index=False)
    write_run_record(outdir, "replicate", cfg, seed,
                     {"scenario": dataclasses.asdict(scenario), "r": r})
    print(summary.to_string(index=False))
    return 0


def cmd_diagnose(args):
    cfg = load_config(args.config)
    schedule = resolve_schedule(cfg)
    dataset = read_trial_csv(args.data, schedule)
    thresholds = cfg.get("diagnose", {}).get("thresholds")
    if thresholds is None:
        thresholds = {k: (11.1 if schedule.weeks[k - 1] <= 12 else 10.0)
                      for k in range(1, schedule.n_visits + 1)}
    else:
        thresholds = {int(k): float(v) for k, v in thresholds.items()}
    report = positivity_diagnostics(dataset, thresholds)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    report.table.to_csv(outdir / "positivity.csv", index=False)
    report.summary.to_csv(outdir / "positivity_summary.csv", index=False)
    write_run_record(outdir, "diagnose", cfg, int(cfg.get("seed", 0)),
                     {"thresholds": {str(k): v for k, v in thresholds.items()}})
    print(report.summary.to_string(index=False))
    for w in report.warnings:
        print(f"positivity warning: {w}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="icefree",
        description="Hypothetical (event-free) treatment-effect estimation for longitudinal trials")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic trial with ground truth")
    p.add_argument("--config", "-c", default=None)
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="run estimators on a trial CSV")
    p.add_argument("data")
    p.add_argument("--config", "-c", default=None)
    p.add_argument("--methods", default=None, help="comma-separated method ids")
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("replicate", help="bias/SE/coverage study over simulated trials")
    p.add_argument("--config", "-c", default=None)
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("diagnose", help="rescue-threshold positivity diagnostics")
    p.add_argument("data")
    p.add_argument("--config", "-c", default=None)
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except IcefreeError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: run one scenario, sweep an axis, or validate a
config file."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, ScenarioConfig, load_config, with_overrides
from .harness import SWEEP_AXES, run_scenario, sweep_and_emit


def _load(path: str | None) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    return load_config(path)


def cmd_run(args) -> int:
    cfg = _load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.policy:
        overrides["policy"] = args.policy
    if args.predictor:
        overrides["predictor"] = args.predictor
    if overrides:
        cfg = with_overrides(cfg, **overrides)
    result = run_scenario(cfg)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        result.write_csv(os.path.join(args.out, "run_result.csv"))
        result.write_events(os.path.join(args.out, "events.jsonl"))
    print(json.dumps({"policy": cfg.policy, "predictor": cfg.predictor,
                      "seed": cfg.seed, **result.aggregates}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args.config)
    values = [float(v) for v in args.values.split(",") if v]
    paths = sweep_and_emit(cfg, args.axis, values, args.reps, args.out)
    print(json.dumps(paths, sort_keys=True))
    return 0


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(f"config ok: K={cfg.n_users}, T={cfg.n_slots}, B={cfg.n_rb}, "
          f"policy={cfg.policy}, predictor={cfg.predictor}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="presched")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("--config", help="config file (defaults used when omitted)")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--policy", choices=["preemptive", "pf_reactive",
                                            "round_robin", "max_snr"])
    p_run.add_argument("--predictor", choices=["kalman", "linear", "external",
                                               "last", "zero", "oracle"])
    p_run.add_argument("--out", help="directory for CSV and event log")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep one axis")
    p_sweep.add_argument("--config")
    p_sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--reps", type=int, default=1)
    p_sweep.add_argument("--out", required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_val = sub.add_parser("validate", help="validate a config file")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

    replidecay <command> [--config FILE] [--seed S] [--out DIR] [--replicas K] [--check] ...

Exit codes: 0 success, 2 invalid configuration, 3 failed check (with --check).
"""

from __future__ import annotations

import argparse
import json
import sys

from .experiments import COMMANDS, ExperimentConfig, load_config


def _floats(s: str) -> list:
    return [float(v) for v in s.split(",") if v]


def _ints(s: str) -> list:
    return [int(v) for v in s.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="replidecay",
                                 description="Replicated storage decay experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--replicas", type=int)
        sp.add_argument("--check", action="store_true", help="exit 3 if the study's check fails")
        g = sp.add_argument_group("model overrides")
        g.add_argument("--n-servers", type=int)
        g.add_argument("--lam", type=float)
        g.add_argument("--mu", type=float)
        g.add_argument("--d", type=int, dest="d_max")
        g.add_argument("--horizon", type=float)
        g.add_argument("--samples", type=int, dest="n_samples")
        g.add_argument("--n-files", type=int, help="fixed total number of initial files")
        g.add_argument("--per-server-mean", type=float, help="Poisson mean of files per server")
        g.add_argument("--collision-mode", choices=["avoid_holders", "uniform_merge"])
        g = sp.add_argument_group("grids")
        g.add_argument("--n-list", type=_ints)
        g.add_argument("--rho-list", type=_floats)
        g.add_argument("--d-list", type=_ints)
        g.add_argument("--delta-list", type=_floats)
        g.add_argument("--beta", type=float)
    return ap


def effective_config(args) -> ExperimentConfig:
    raw = load_config(args.config) if args.config else {}
    raw = dict(raw)
    raw["kind"] = args.command
    params = dict(raw.get("params", {}))
    for key in ("seed", "n_servers", "lam", "mu", "d_max", "horizon", "n_samples",
                "collision_mode"):
        v = getattr(args, key, None)
        if v is not None:
            params[key] = v
    if args.n_files is not None:
        params["initial_load"] = {"type": "fixed_total", "n_files": args.n_files}
    if args.per_server_mean is not None:
        params["initial_load"] = {"type": "per_server", "kind": "poisson",
                                  "mean": args.per_server_mean}
    raw["params"] = params
    for key in ("out", "replicas", "n_list", "rho_list", "d_list", "delta_list", "beta"):
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    return ExperimentConfig.from_dict(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError, OSError) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return 2
    try:
        summary, ok = COMMANDS[cfg.kind](cfg)
    except ValueError as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return 2
    print(json.dumps({"command": cfg.kind, "out": cfg.out, "check_passed": ok}))
    if args.check and not ok:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``regretlab {gen,plan,run,sweep,audit,report}``.

Exit codes: 0 success, 2 invalid input (MDP, config, arguments), 3 audit failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .agents import AGENT_NAMES, AgentSpec
from .envs import FAMILIES, MdpFormatError, generate, load_mdp, save_mdp
from .harness import (
    ConfigError,
    EnvSource,
    ExperimentConfig,
    audit_run_dir,
    load_config,
    plan_summary,
    report_run_dir,
    run_sweep,
)
from .mdp import BRUTE_FORCE_CAP, InvalidMdpError

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_AUDIT = 3


def _parse_params(pairs: list[str], raw: str | None) -> dict:
    params = json.loads(raw) if raw else {}
    for pair in pairs or []:
        key, _, value = pair.partition("=")
        try:
            params[key] = json.loads(value)
        except json.JSONDecodeError:
            params[key] = value
    return params


def _checkpoints(value: str | None):
    if value in (None, "pow2"):
        return "pow2"
    return [int(x) for x in value.split(",")]


def cmd_gen(args) -> int:
    mdp = generate(args.family, _parse_params(args.param, args.params))
    save_mdp(mdp, args.out)
    print(f"wrote {args.out} (S={mdp.num_states}, A={mdp.num_actions}, H={mdp.horizon}, mode={mdp.mode.value})")
    return EXIT_OK


def cmd_plan(args) -> int:
    env = load_mdp(args.env)
    print(json.dumps(plan_summary(env, args.policy_cap), indent=1))
    return EXIT_OK


def _audit_exit(summary: dict) -> int:
    return EXIT_OK if summary["all_audits_passed"] else EXIT_AUDIT


def cmd_run(args) -> int:
    overrides = {"delta": args.delta} if args.delta is not None and args.agent in ("mvp", "ucbvi") else {}
    cfg = ExperimentConfig(
        envs=[EnvSource(Path(args.env).stem, file=str(Path(args.env).resolve()))],
        agents=[AgentSpec(args.agent, overrides)],
        episodes=args.episodes,
        seeds=[args.seed],
        checkpoints=_checkpoints(args.checkpoints),
        backend=args.backend,
        record_timing=args.timing,
    )
    summary = run_sweep(cfg, args.out, jobs=1)
    for g in summary["groups"]:
        print(f"{g['env_id']} {g['agent']}: Regret(K={args.episodes}) = {g['mean'][-1]:.6g}; audits {g['audits']}")
    return _audit_exit(summary)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.backend:
        cfg.backend = args.backend
    out = args.out or cfg.output
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'output' in the config")
    summary = run_sweep(cfg, out, jobs=args.jobs)
    for g in summary["groups"]:
        fit = g["fit"]
        slope = f"{fit['slope']:.3f}" if "slope" in fit else "n/a"
        print(f"{g['env_id']:>20} {g['agent']:>10}  Regret(K)={g['mean'][-1]:.6g}  slope={slope}  "
              f"audits={'pass' if all(g['audits'].values()) else 'FAIL'}")
    return _audit_exit(summary)


def cmd_audit(args) -> int:
    report = audit_run_dir(args.run_dir)
    for cell in report["cells"]:
        bad = [c["name"] for c in cell["checks"] if not c["passed"]]
        print(f"{cell['run_id']}: {'pass' if not bad else 'FAIL ' + ','.join(bad)}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return EXIT_OK if report["passed"] else EXIT_AUDIT


def cmd_report(args) -> int:
    rows, fits = report_run_dir(args.run_dir, args.fit_min, args.fit_max)
    out = Path(args.out) if args.out else Path(args.run_dir) / "report.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["env_id", "agent", "checkpoint", "mean", "p10", "p90"])
        writer.writerows(rows)
    for f in fits:
        slope = f"{f['slope']:.4f} +- {f['stderr']:.4f}" if "slope" in f else f["error"]
        print(f"{f['env_id']} {f['agent']}: slope {slope}")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regretlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate an instance file")
    p.add_argument("family", choices=FAMILIES)
    p.add_argument("-p", "--param", action="append", metavar="KEY=VALUE", help="generator parameter (JSON value)")
    p.add_argument("--params", help="generator parameters as a JSON object")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("plan", help="print V*, Q*, and problem metrics")
    p.add_argument("env", nargs="?")
    p.add_argument("--env", dest="env_flag")
    p.add_argument("--policy-cap", type=int, default=BRUTE_FORCE_CAP)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="run a single cell")
    p.add_argument("--env", required=True)
    p.add_argument("--agent", choices=AGENT_NAMES, default="mvp")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float)
    p.add_argument("--backend", choices=("ondemand", "expanded", "both"), default="ondemand")
    p.add_argument("--checkpoints", default="pow2", help="'pow2' or a comma-separated list")
    p.add_argument("--timing", action="store_true", help="record wall-clock time (breaks byte determinism)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a full experiment grid from a config file")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, help="worker processes (default: $REGRETLAB_JOBS or config)")
    p.add_argument("--backend", choices=("ondemand", "expanded", "both"))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("audit", help="replay theory audits on a result directory")
    p.add_argument("run_dir")
    p.add_argument("--json", help="also write the full report here")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="aggregate curves and fit log-log slopes")
    p.add_argument("run_dir")
    p.add_argument("--fit-min", type=int)
    p.add_argument("--fit-max", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "plan":
        args.env = args.env_flag or args.env
        if not args.env:
            parser.error("plan needs an instance file")
    try:
        return args.func(args)
    except (InvalidMdpError, MdpFormatError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

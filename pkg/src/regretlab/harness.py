"""Experiment configs, deterministic sweeps, replayable audits, and reports.

A sweep directory contains::

    manifest.json      config hash, tool version, sha256 of every other file
    config.json        canonical copy of the semantic config
    runs.csv           one row per (cell, checkpoint)
    summary.json       per (env, agent) aggregates, slope fits, audit outcomes
    envs/<env>.json    every instance in the MDP file format
    cells/<run>.json   agent snapshot plus the audit log of one cell

Nothing time- or host-dependent is written unless ``record_timing`` is set,
so repeating a sweep reproduces the directory byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .agents import AgentSpec
from .envs import dumps_mdp, generate, load_mdp
from .mdp import TabularMdp, bellman_optimal
from .metrics import (
    AuditOutcome,
    DEFAULT_FIT_MIN,
    audit_doubling,
    audit_optimism,
    audit_refresh_log,
    audit_regret_bound,
    fit_scaling,
    problem_metrics,
)
from .simulate import BACKENDS, pow2_checkpoints, run_online

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = "regret-lab-config/1"
CSV_COLUMNS = ["run_id", "env_id", "agent", "seed", "K_budget", "checkpoint_k", "cum_regret",
               "epochs", "refreshes", "optimism_violations", "wall_ms"]


class ConfigError(ValueError):
    pass


@dataclass
class EnvSource:
    id: str
    family: str | None = None
    params: dict = field(default_factory=dict)
    file: str | None = None

    def build(self, base_dir: Path | None = None) -> TabularMdp:
        if self.file is not None:
            path = Path(self.file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return load_mdp(path)
        return generate(self.family, self.params)

    def to_dict(self) -> dict:
        if self.file is not None:
            return {"id": self.id, "file": self.file}
        return {"id": self.id, "family": self.family, "params": self.params}


@dataclass
class ExperimentConfig:
    envs: list[EnvSource]
    agents: list[AgentSpec]
    episodes: int
    seeds: list[int]
    checkpoints: list[int] | str = "pow2"
    backend: str = "ondemand"
    fit_k_min: int = DEFAULT_FIT_MIN
    fit_k_max: int | None = None
    jobs: int = 1
    output: str | None = None
    record_timing: bool = False
    save_q_history: bool = True
    base_dir: Path | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def checkpoint_list(self) -> list[int]:
        if self.checkpoints == "pow2":
            return pow2_checkpoints(self.episodes)
        return sorted(set(int(k) for k in self.checkpoints))

    def semantic_dict(self) -> dict:
        """Every field that changes results; output location and job count excluded."""
        return {
            "version": CONFIG_SCHEMA_VERSION,
            "envs": [e.to_dict() for e in self.envs],
            "agents": [{"name": a.name, "label": a.label, "overrides": a.overrides} for a in self.agents],
            "episodes": self.episodes,
            "checkpoints": self.checkpoints,
            "seeds": self.seeds,
            "backend": self.backend,
            "fit": {"k_min": self.fit_k_min, "k_max": self.fit_k_max},
            "record_timing": self.record_timing,
            "save_q_history": self.save_q_history,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.semantic_dict()).encode()).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def derive_seeds(master: int, replications: int) -> list[int]:
    state = np.random.SeedSequence(int(master)).generate_state(int(replications), dtype=np.uint64)
    return [int(x) for x in state]


def parse_config(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if doc.get("version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"version mismatch: expected {CONFIG_SCHEMA_VERSION!r}, got {doc.get('version')!r}")
    try:
        envs = []
        for rec in doc["envs"]:
            if ("file" in rec) == ("family" in rec):
                raise ConfigError(f"env {rec.get('id')!r} needs exactly one of 'file' or 'family'")
            envs.append(EnvSource(rec["id"], rec.get("family"), dict(rec.get("params", {})), rec.get("file")))
        agents = [AgentSpec(a["name"], dict(a.get("overrides", {})), a.get("label")) for a in doc["agents"]]
        K = int(doc["episodes"])
        seeds_doc = doc["seeds"]
        if isinstance(seeds_doc, dict):
            seeds = derive_seeds(seeds_doc["master"], seeds_doc["replications"])
        else:
            seeds = [int(s) for s in seeds_doc]
        fit = doc.get("fit", {})
        cfg = ExperimentConfig(
            envs=envs,
            agents=agents,
            episodes=K,
            seeds=seeds,
            checkpoints=doc.get("checkpoints", "pow2"),
            backend=doc.get("backend", "ondemand"),
            fit_k_min=int(fit.get("k_min", DEFAULT_FIT_MIN)),
            fit_k_max=fit.get("k_max"),
            jobs=int(doc.get("jobs", 1)),
            output=doc.get("output"),
            record_timing=bool(doc.get("record_timing", False)),
            save_q_history=bool(doc.get("save_q_history", True)),
            base_dir=base_dir,
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed config: {exc!r}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if K < 1:
        raise ConfigError("episodes must be >= 1")
    if K & (K - 1):
        cfg.warnings.append(f"episode budget {K} is not a power of two")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    if len({e.id for e in envs}) != len(envs) or len({a.label for a in agents}) != len(agents):
        raise ConfigError("env ids and agent labels must be unique")
    if cfg.backend not in BACKENDS + ("both",):
        raise ConfigError(f"backend must be one of {BACKENDS + ('both',)}")
    if cfg.checkpoints != "pow2":
        ks = cfg.checkpoint_list
        if not ks or ks[0] < 1 or ks[-1] > K:
            raise ConfigError("checkpoints must lie in [1, episodes]")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(doc, base_dir=path.parent)


def bundled_config_path(name: str = "acceptance") -> Path:
    return Path(__file__).parent / "configs" / f"{name}.json"


# ------------------------------------------------------------------ cells

@dataclass
class Cell:
    index: int
    env_id: str
    env: TabularMdp
    agent: AgentSpec
    seed: int
    K: int
    checkpoints: list[int]
    backend: str
    record_timing: bool
    save_q_history: bool

    @property
    def run_id(self) -> str:
        return f"{self.env_id}__{self.agent.label}__s{self.seed}"


def run_cell(cell: Cell) -> dict:
    """Run one (env, agent, seed) cell; with backend 'both' the expanded run is a coupling check."""
    primary = "ondemand" if cell.backend == "both" else cell.backend
    res = run_online(cell.env, cell.agent, cell.K, cell.seed, primary, cell.checkpoints)
    coupled = None
    if cell.backend == "both":
        twin = run_online(cell.env, cell.agent, cell.K, cell.seed, "expanded", cell.checkpoints)
        coupled = (twin.trajectory_digest == res.trajectory_digest
                   and np.array_equal(twin.ledger.gaps, res.ledger.gaps))
    S, A, H = cell.env.shape
    agent = res.agent
    cum = res.ledger.at_checkpoints()
    positive = np.flatnonzero(res.ledger.gaps > 0)
    audits = [audit_regret_bound(res.ledger.total, H, cell.K).to_dict()]
    if hasattr(agent, "refreshes"):
        audits.append(audit_doubling(agent.refreshes, S, A, H, cell.K, res.inv_count_sum).to_dict())
        audits.append(audit_refresh_log(agent.refresh_log, S, A, H).to_dict())
    if hasattr(agent, "backups"):
        audits.append(AuditOutcome("optimism", res.optimism_violations == 0,
                                   {"violations": res.optimism_violations}).to_dict())
    if coupled is not None:
        audits.append(AuditOutcome("coupling", bool(coupled), {"digest": res.trajectory_digest}).to_dict())
    payload = {
        "run_id": cell.run_id,
        "env_id": cell.env_id,
        "agent": cell.agent.label,
        "seed": cell.seed,
        "K_budget": cell.K,
        "backend": cell.backend,
        "trajectory_digest": res.trajectory_digest,
        "cum_regret": res.ledger.total,
        "last_positive_gap_episode": int(positive[-1]) + 1 if positive.size else 0,
        "epochs": res.epochs,
        "refreshes": res.refreshes,
        "optimism_violations": res.optimism_violations,
        "inv_count_sum": res.inv_count_sum,
        "bonus_sum": res.bonus_sum,
        "audits": audits,
        "snapshot": agent.snapshot(),
    }
    if cell.save_q_history and hasattr(agent, "q_history"):
        payload["q_history"] = [[k, q.tolist()] for k, q in agent.q_history]
    if cell.record_timing:
        payload["wall_ms"] = res.wall_ms
    rows = [[cell.run_id, cell.env_id, cell.agent.label, cell.seed, cell.K, k, repr(v), res.epochs,
             res.refreshes, res.optimism_violations,
             f"{res.wall_ms:.1f}" if cell.record_timing else ""] for k, v in cum.items()]
    return {"index": cell.index, "rows": rows, "payload": payload, "curve": list(cum.values())}


def resolve_jobs(jobs: int | None) -> int:
    if jobs is None:
        jobs = int(os.environ.get("REGRETLAB_JOBS", "1"))
    return max(1, jobs)


def build_cells(cfg: ExperimentConfig) -> tuple[dict[str, TabularMdp], list[Cell]]:
    envs = {e.id: e.build(cfg.base_dir) for e in cfg.envs}
    for env_id, env in envs.items():
        env.require_valid()
    cells = []
    for env_id, env in envs.items():
        for agent in cfg.agents:
            for seed in cfg.seeds:
                cells.append(Cell(len(cells), env_id, env, agent, seed, cfg.episodes, cfg.checkpoint_list,
                                  cfg.backend, cfg.record_timing, cfg.save_q_history))
    return envs, cells


def execute(cells: list[Cell], jobs: int = 1) -> list[dict]:
    if jobs <= 1 or len(cells) <= 1:
        results = [run_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, cells))
    return sorted(results, key=lambda r: r["index"])


def _dump(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def summarize(cfg: ExperimentConfig, envs: dict[str, TabularMdp], results: list[dict]) -> dict:
    ks = cfg.checkpoint_list
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in results:
        groups.setdefault((r["payload"]["env_id"], r["payload"]["agent"]), []).append(r)
    summary = {"checkpoints": ks, "groups": []}
    for (env_id, agent), members in groups.items():
        curves = np.array([m["curve"] for m in members])
        entry: dict[str, Any] = {
            "env_id": env_id,
            "agent": agent,
            "seeds": len(members),
            "mean": curves.mean(axis=0).tolist(),
            "median": np.median(curves, axis=0).tolist(),
            "max_cum_regret": float(curves[:, -1].max()),
            "trivial_bound": envs[env_id].horizon * cfg.episodes,
        }
        try:
            fit = fit_scaling(ks, curves, cfg.fit_k_min, cfg.fit_k_max)
            entry["fit"] = {"slope": fit.slope, "intercept": fit.intercept, "stderr": fit.stderr,
                            "points": fit.points}
        except ValueError as exc:
            entry["fit"] = {"error": str(exc)}
        audit_names = sorted({a["name"] for m in members for a in m["payload"]["audits"]})
        entry["audits"] = {name: all(a["passed"] for m in members for a in m["payload"]["audits"]
                                     if a["name"] == name) for name in audit_names}
        entry["optimism_violations"] = int(sum(m["payload"]["optimism_violations"] for m in members))
        summary["groups"].append(entry)
    summary["all_audits_passed"] = all(all(g["audits"].values()) for g in summary["groups"])
    return summary


def write_results(cfg: ExperimentConfig, envs: dict[str, TabularMdp], results: list[dict], out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", cfg.semantic_dict())
    for env_id, env in envs.items():
        path = out / "envs" / f"{env_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_mdp(env))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in results:
        writer.writerows(r["rows"])
    (out / "runs.csv").write_text(buf.getvalue())
    for r in results:
        _dump(out / "cells" / f"{r['payload']['run_id']}.json", r["payload"])
    summary = summarize(cfg, envs, results)
    _dump(out / "summary.json", summary)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "tool": "regretlab",
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "warnings": cfg.warnings,
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    _dump(out / "manifest.json", manifest)
    return summary


def run_sweep(cfg: ExperimentConfig, out, jobs: int | None = None) -> dict:
    """Run the full grid and write the result directory; returns the summary."""
    for w in cfg.warnings:
        log.warning(w)
    envs, cells = build_cells(cfg)
    results = execute(cells, resolve_jobs(jobs if jobs is not None else cfg.jobs))
    return write_results(cfg, envs, results, Path(out))


# ------------------------------------------------------------------ replay

def audit_run_dir(run_dir) -> dict:
    """Re-derive every audit from the files of a result directory."""
    run_dir = Path(run_dir)
    cfg = parse_config(json.loads((run_dir / "config.json").read_text()))
    envs = {p.stem: load_mdp(p) for p in sorted((run_dir / "envs").glob("*.json"))}
    final: dict[str, float] = {}
    with open(run_dir / "runs.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if int(row["checkpoint_k"]) == int(row["K_budget"]):
                final[row["run_id"]] = float(row["cum_regret"])
    report: dict[str, Any] = {"cells": [], "passed": True}
    for path in sorted((run_dir / "cells").glob("*.json")):
        cell = json.loads(path.read_text())
        env = envs[cell["env_id"]]
        S, A, H = env.shape
        K = cell["K_budget"]
        checks = [audit_regret_bound(final.get(cell["run_id"], math.inf), H, K)]
        snap = cell["snapshot"]
        if "refreshes" in snap:
            checks.append(audit_doubling(np.array(snap["refreshes"]), S, A, H, K, cell["inv_count_sum"]))
            checks.append(audit_refresh_log(snap["refresh_log"], S, A, H))
        if "q_history" in cell:
            n = audit_optimism([q for _, q in cell["q_history"]], env)
            checks.append(AuditOutcome("optimism", n == 0, {"violations": n}))
        elif "q" in snap:
            checks.append(AuditOutcome("optimism", cell["optimism_violations"] == 0,
                                       {"violations": cell["optimism_violations"], "replayed": False}))
        if cell.get("backend") == "both":
            stored = next((a for a in cell["audits"] if a["name"] == "coupling"), None)
            checks.append(AuditOutcome("coupling", bool(stored and stored["passed"]), {"replayed": False}))
        ok = all(c.passed for c in checks)
        report["passed"] = report["passed"] and ok
        report["cells"].append({"run_id": cell["run_id"], "passed": ok, "checks": [c.to_dict() for c in checks]})
    report["config_hash"] = cfg.config_hash()
    return report


def report_run_dir(run_dir, k_min: int | None = None, k_max: int | None = None) -> tuple[list[list], list[dict]]:
    """Long-format (env, agent, checkpoint, mean, p10, p90) rows and per-group slope fits."""
    run_dir = Path(run_dir)
    curves: dict[tuple[str, str], dict[str, dict[int, float]]] = {}
    with open(run_dir / "runs.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["env_id"], row["agent"])
            curves.setdefault(key, {}).setdefault(row["run_id"], {})[int(row["checkpoint_k"])] = float(row["cum_regret"])
    rows: list[list] = []
    fits: list[dict] = []
    for (env_id, agent), runs in sorted(curves.items()):
        ks = sorted(set().union(*(r.keys() for r in runs.values())))
        mat = np.array([[r[k] for k in ks] for r in runs.values()])
        for j, k in enumerate(ks):
            col = mat[:, j]
            rows.append([env_id, agent, k, repr(float(col.mean())), repr(float(np.percentile(col, 10))),
                         repr(float(np.percentile(col, 90)))])
        entry = {"env_id": env_id, "agent": agent}
        try:
            fit = fit_scaling(ks, mat, DEFAULT_FIT_MIN if k_min is None else k_min, k_max)
            entry.update(slope=fit.slope, intercept=fit.intercept, stderr=fit.stderr, points=fit.points)
        except ValueError as exc:
            entry["error"] = str(exc)
        fits.append(entry)
    return rows, fits


def plan_summary(env: TabularMdp, policy_cap: int) -> dict:
    table, pi = bellman_optimal(env)
    metrics = problem_metrics(env, policy_cap)
    return {
        "shape": {"S": env.num_states, "A": env.num_actions, "H": env.horizon, "mode": env.mode.value},
        "v_optimal": table.v.tolist(),
        "q_optimal": table.q.tolist(),
        "greedy_policy": pi.tolist(),
        "metrics": metrics.to_dict(env.metadata.get("family", "env")),
    }

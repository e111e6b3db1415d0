import csv
import hashlib
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from regretlab.agents import AgentSpec
from regretlab.cli import EXIT_AUDIT, EXIT_INVALID, EXIT_OK, main
from regretlab.envs import gen_hard_chain, gen_jao, mdp_to_dict, save_mdp
from regretlab.harness import (
    CSV_COLUMNS,
    ConfigError,
    EnvSource,
    ExperimentConfig,
    bundled_config_path,
    canonical_json,
    derive_seeds,
    load_config,
    parse_config,
    run_sweep,
)


def small_config(**extra):
    doc = {
        "version": "regret-lab-config/1",
        "envs": [{"id": "jao", "family": "jao", "params": {"H": 6}},
                 {"id": "chain", "family": "hard_chain", "params": {"S": 2, "A": 2, "H": 3, "seed": 0}}],
        "agents": [{"name": "mvp"}, {"name": "random"}],
        "episodes": 256,
        "seeds": [1, 2, 3],
        "backend": "both",
        "fit": {"k_min": 16},
    }
    doc.update(extra)
    return doc


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_hash_ignores_key_order_and_output(self):
        a = parse_config(small_config())
        doc = small_config(output="/tmp/x", jobs=4)
        b = parse_config(json.loads(json.dumps(doc, sort_keys=True)))
        assert a.config_hash() == b.config_hash()
        c = parse_config(small_config(episodes=512))
        assert a.config_hash() != c.config_hash()

    def test_canonical_json(self):
        assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'

    def test_derived_seeds(self):
        seeds = derive_seeds(20240101, 20)
        assert seeds == derive_seeds(20240101, 20)
        assert len(set(seeds)) == 20
        assert derive_seeds(20240101, 5) == seeds[:5]

    def test_non_power_of_two_warns(self):
        cfg = parse_config(small_config(episodes=300))
        assert any("power of two" in w for w in cfg.warnings)

    @pytest.mark.parametrize("patch", [
        {"version": "regret-lab-config/0"},
        {"seeds": [1, 1]},
        {"backend": "gpu"},
        {"agents": [{"name": "mvp"}, {"name": "mvp"}]},
        {"agents": [{"name": "random", "overrides": {"delta": 0.1}}]},
        {"envs": [{"id": "x", "family": "jao", "file": "x.json"}]},
        {"checkpoints": [0, 4]},
        {"episodes": 0},
    ])
    def test_rejects(self, patch):
        with pytest.raises(ConfigError):
            parse_config(small_config(**patch))

    def test_bundled_configs_parse(self):
        for name in ("acceptance", "scaling", "hard_chain", "scaled_constants"):
            cfg = load_config(bundled_config_path(name))
            assert cfg.envs and cfg.agents

    def test_file_env_relative_to_config(self, tmp_path):
        save_mdp(gen_jao(6), tmp_path / "jao.json")
        doc = small_config(envs=[{"id": "j", "file": "jao.json"}])
        (tmp_path / "cfg.json").write_text(json.dumps(doc))
        cfg = load_config(tmp_path / "cfg.json")
        assert cfg.envs[0].build(cfg.base_dir).equals(gen_jao(6))


class TestSweep:
    def test_outputs_and_determinism(self, tmp_path):
        cfg = parse_config(small_config())
        s1 = run_sweep(cfg, tmp_path / "a", jobs=1)
        run_sweep(cfg, tmp_path / "b", jobs=1)
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        assert s1["all_audits_passed"]
        names = set(tree_bytes(tmp_path / "a"))
        assert {"manifest.json", "config.json", "runs.csv", "summary.json", "envs/jao.json"} <= names
        with open(tmp_path / "a" / "runs.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == CSV_COLUMNS
        assert len(rows) == 2 * 2 * 3 * 9
        assert all(r["wall_ms"] == "" for r in rows)

    def test_parallel_matches_serial(self, tmp_path):
        cfg = parse_config(small_config(backend="ondemand"))
        run_sweep(cfg, tmp_path / "serial", jobs=1)
        run_sweep(cfg, tmp_path / "parallel", jobs=2)
        assert tree_bytes(tmp_path / "serial") == tree_bytes(tmp_path / "parallel")

    def test_manifest_hashes(self, tmp_path):
        cfg = parse_config(small_config(backend="ondemand"))
        run_sweep(cfg, tmp_path, jobs=1)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config_hash"] == cfg.config_hash()
        for name, digest in manifest["files"].items():
            assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == digest

    def test_timing_only_when_requested(self, tmp_path):
        cfg = parse_config(small_config(backend="ondemand", record_timing=True, seeds=[1]))
        run_sweep(cfg, tmp_path, jobs=1)
        with open(tmp_path / "runs.csv") as fh:
            assert all(r["wall_ms"] != "" for r in csv.DictReader(fh))

    def test_config_object_direct(self, tmp_path):
        cfg = ExperimentConfig(envs=[EnvSource("chain", "hard_chain", {"S": 2, "A": 2, "H": 3, "seed": 0})],
                               agents=[AgentSpec("oracle")], episodes=32, seeds=[0])
        summary = run_sweep(cfg, tmp_path, jobs=1)
        assert summary["groups"][0]["mean"][-1] == 0.0


class TestCli:
    def test_gen_and_plan(self, tmp_path, capsys):
        out = tmp_path / "chain.json"
        assert main(["gen", "hard_chain", "-p", "S=2", "-p", "A=2", "-p", "H=4", "-p", "seed=0", "--out", str(out)]) == EXIT_OK
        assert main(["plan", str(out)]) == EXIT_OK
        printed = capsys.readouterr().out
        doc = json.loads(printed[printed.index("{"):])
        assert doc["metrics"]["v_star"] == 4.0
        assert doc["metrics"]["var1"] == 0.0 and doc["metrics"]["var2"] == 0.0

    def test_plan_invalid_file(self, tmp_path):
        doc = mdp_to_dict(gen_jao(6))
        doc["transitions"][0][0][0] = [0.5, 0.4]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        assert main(["plan", str(path)]) == EXIT_INVALID

    def test_plan_version_mismatch(self, tmp_path):
        doc = mdp_to_dict(gen_jao(6))
        doc["version"] = "regret-lab-mdp/0"
        path = tmp_path / "old.json"
        path.write_text(json.dumps(doc))
        assert main(["plan", str(path)]) == EXIT_INVALID

    def test_plan_var2_unavailable(self, tmp_path, capsys):
        out = tmp_path / "big.json"
        main(["gen", "random", "--params", '{"S": 3, "A": 4, "H": 10, "seed": 0}', "--out", str(out)])
        capsys.readouterr()
        assert main(["plan", str(out)]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["metrics"]["var2"] == "unavailable"

    def test_run_audit_report(self, tmp_path, capsys):
        env = tmp_path / "jao.json"
        save_mdp(gen_jao(6), env)
        run_dir = tmp_path / "run"
        assert main(["run", "--env", str(env), "--agent", "mvp", "--episodes", "512", "--seed", "3",
                     "--backend", "both", "--out", str(run_dir)]) == EXIT_OK
        assert main(["audit", str(run_dir), "--json", str(tmp_path / "audit.json")]) == EXIT_OK
        report = json.loads((tmp_path / "audit.json").read_text())
        assert report["passed"]
        names = {c["name"] for c in report["cells"][0]["checks"]}
        assert {"regret_le_HK", "doubling", "profiles", "optimism", "coupling"} <= names
        assert main(["report", str(run_dir), "--fit-min", "16"]) == EXIT_OK
        assert (run_dir / "report.csv").exists()

    def test_audit_detects_tampering(self, tmp_path):
        env = tmp_path / "chain.json"
        save_mdp(gen_hard_chain(2, 2, 3, seed=0), env)
        run_dir = tmp_path / "run"
        main(["run", "--env", str(env), "--episodes", "64", "--out", str(run_dir)])
        cell_path = next((run_dir / "cells").glob("*.json"))
        cell = json.loads(cell_path.read_text())
        cell["snapshot"]["refreshes"][0][0][0] = 50
        cell_path.write_text(json.dumps(cell))
        assert main(["audit", str(run_dir)]) == EXIT_AUDIT

    def test_report_on_sqrt_curves(self, tmp_path, capsys):
        run_dir = tmp_path / "synthetic"
        run_dir.mkdir()
        with open(run_dir / "runs.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for seed in range(3):
                for j in range(15):
                    k = 2**j
                    writer.writerow([f"e__a__s{seed}", "e", "a", seed, 2**14, k, repr(2.0 * math.sqrt(k)), 1, 0, 0, ""])
        assert main(["report", str(run_dir)]) == EXIT_OK
        out = capsys.readouterr().out
        slope = float(out.split("slope ")[1].split()[0])
        assert abs(slope - 0.5) <= 1e-9
        with open(run_dir / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[-1]["mean"]) == pytest.approx(2 * 2**7)

    def test_sweep_cli(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(small_config(backend="ondemand", seeds=[4])))
        assert main(["sweep", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(["sweep", str(cfg)]) == EXIT_INVALID  # no output directory

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        assert main(["sweep", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INVALID

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "regretlab", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "sweep" in proc.stdout


def test_sweep_summary_slopes_are_finite(tmp_path):
    summary = run_sweep(parse_config(small_config(backend="ondemand")), tmp_path, jobs=1)
    for g in summary["groups"]:
        assert np.isfinite(g["fit"]["slope"])

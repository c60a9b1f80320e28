import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from expmnf.cli import _apply_smoke, load_config, main, random_search, run_experiment
from test_data import make_raw_adult

SYNTH_BASE = {
    "experiment": {
        "name": "t",
        "method": "nonprivate",
        "seeds": [0, 1],
        "epsilons": [1.0],
        "delta": 1e-5,
    },
    "dataset": {"kind": "synth", "seed": 0, "n": 400, "p": 3, "separation": 6.0},
    "model": {"bias": True},
    "nonprivate": {"steps": 150, "learning_rate": 0.05},
}


def deep(update, base=None):
    import copy

    cfg = copy.deepcopy(SYNTH_BASE if base is None else base)
    for key, val in update.items():
        if isinstance(val, dict) and key in cfg:
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


class TestRunExperiment:
    def test_nonprivate_separable_blobs_high_auc(self, tmp_path):
        manifest = run_experiment(SYNTH_BASE, output_dir=tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["per_epsilon"]["inf"]["median_auc"] >= 0.99
        assert not manifest["any_failed"]

    def test_rerun_metric_files_byte_identical(self, tmp_path):
        m1 = run_experiment(SYNTH_BASE, output_dir=tmp_path / "a")
        m2 = run_experiment(SYNTH_BASE, output_dir=tmp_path / "b")
        assert m1["digests"] == m2["digests"]
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()

    def test_parallel_jobs_same_output(self, tmp_path):
        m1 = run_experiment(SYNTH_BASE, output_dir=tmp_path / "a", jobs=1)
        m2 = run_experiment(SYNTH_BASE, output_dir=tmp_path / "b", jobs=2)
        assert m1["digests"] == m2["digests"]

    def test_expm_nf_quadratic_smoke_cell(self, tmp_path):
        cfg = deep(
            {
                "experiment": {"method": "expm_nf", "seeds": [0], "epsilons": [1.0]},
                "expm_nf": {
                    "flows": 2,
                    "steps": 60,
                    "nf_batch": 16,
                    "learning_rate": 0.01,
                    "samples_per_model": 25,
                },
            }
        )
        manifest = run_experiment(cfg, output_dir=tmp_path)
        assert not manifest["any_failed"]
        rows = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 25  # header + one AUC row per sample
        assert (tmp_path / "history_expm_nf_eps1_seed0.csv").exists()
        assert (tmp_path / "stack_expm_nf_eps1_seed0.json").exists()

    def test_dpsgd_writes_accountant_to_manifest(self, tmp_path):
        cfg = deep(
            {
                "experiment": {"method": "dpsgd", "seeds": [0], "epsilons": [1.0]},
                "dpsgd": {"steps": 30, "sampling_rate": 0.05, "learning_rate": 0.5},
            }
        )
        manifest = run_experiment(cfg, output_dir=tmp_path)
        acct = manifest["accountant"]["1.0"]
        assert acct["sigma"] > 0
        assert acct["best_alpha"] > 1
        assert acct["epsilon_rdp"] <= 1.0

    def test_infeasible_epsilon_recorded_not_fatal(self, tmp_path):
        cfg = deep(
            {
                "experiment": {"method": "dpsgd", "seeds": [0], "epsilons": [1e-6, 1.0]},
                "dpsgd": {"steps": 500, "sampling_rate": 0.05},
            }
        )
        manifest = run_experiment(cfg, output_dir=tmp_path)
        assert manifest["any_failed"]  # the 1e-6 cell
        rows = (tmp_path / "metrics.csv").read_text()
        assert "InfeasibleTargetError" in rows
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["per_epsilon"]["1e-06"]["n_failed"] == 1
        assert summary["per_epsilon"]["1.0"]["n_ok"] == 1

    def test_every_cell_has_a_row_even_on_failure(self, tmp_path):
        cfg = deep(
            {
                "experiment": {"method": "dpsgd", "seeds": [0, 1], "epsilons": [1e-6]},
                "dpsgd": {"steps": 500, "sampling_rate": 0.05},
            }
        )
        run_experiment(cfg, output_dir=tmp_path)
        rows = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 2  # header + one status row per seed

    def test_duplicate_seeds_rejected(self, tmp_path):
        cfg = deep({"experiment": {"seeds": [0, 0]}})
        with pytest.raises(ValueError):
            run_experiment(cfg, output_dir=tmp_path)

    def test_nonpositive_epsilon_rejected(self, tmp_path):
        cfg = deep({"experiment": {"method": "dpsgd", "epsilons": [0.0]}, "dpsgd": {}})
        with pytest.raises(ValueError):
            run_experiment(cfg, output_dir=tmp_path)

    def test_smoke_shrinks_config(self):
        cfg = deep({"experiment": {"seeds": list(range(10))}, "nonprivate": {"steps": 5000}})
        small = _apply_smoke(cfg)
        assert small["experiment"]["seeds"] == [0, 1]
        assert small["nonprivate"]["steps"] == 100


class TestRandomSearch:
    def test_budget_one_returns_single_trial(self):
        cfg = deep({"search": {"budget": 1, "space": {"learning_rate": [0.05, 0.1]}}})
        result = random_search(cfg)
        assert len(result["trials"]) == 1
        assert result["best"]["status"] == "ok"

    def test_single_point_space_returns_that_point(self):
        cfg = deep({"search": {"budget": 3, "space": {"learning_rate": [0.07]}}})
        result = random_search(cfg)
        assert result["best"]["hp"]["learning_rate"] == 0.07

    def test_selects_faster_learning_rate_on_blobs(self):
        cfg = deep(
            {
                "nonprivate": {"steps": 40},
                "search": {"budget": 6, "space": {"learning_rate": [1e-3, 1e-1]}},
            }
        )
        result = random_search(cfg)
        assert result["best"]["hp"]["learning_rate"] == 1e-1

    def test_zero_budget_rejected(self):
        with pytest.raises(ValueError):
            random_search(SYNTH_BASE, budget=0)


class TestCliCommands:
    def test_prepare_data_and_run_from_csv(self, tmp_path):
        raw = tmp_path / "raw.csv"
        make_raw_adult(n=300).to_csv(raw, index=False)
        prepared = tmp_path / "prepared.csv"
        runner = CliRunner()
        res = runner.invoke(main, ["prepare-data", "--raw", str(raw), "--out", str(prepared)])
        assert res.exit_code == 0, res.output
        assert prepared.exists()
        assert Path(str(prepared) + ".provenance.json").exists() or (
            tmp_path / "prepared.csv.provenance.json"
        ).exists()

        config = deep({"dataset": {"kind": "csv", "path": str(prepared)}})
        cfg_path = tmp_path / "cfg.toml"
        cfg_path.write_text(_to_toml(config))
        out_dir = tmp_path / "run"
        res = runner.invoke(
            main, ["run", "--config", str(cfg_path), "--output-dir", str(out_dir)]
        )
        assert res.exit_code == 0, res.output
        assert (out_dir / "metrics.csv").exists()
        assert (out_dir / "manifest.json").exists()

    def test_report_command(self, tmp_path):
        run_experiment(SYNTH_BASE, output_dir=tmp_path)
        res = CliRunner().invoke(main, ["report", "--output-dir", str(tmp_path)])
        assert res.exit_code == 0, res.output
        assert "median AUC" in res.output

    def test_search_command_writes_trials(self, tmp_path):
        config = deep({"search": {"budget": 2, "space": {"learning_rate": [0.05, 0.1]}}})
        cfg_path = tmp_path / "cfg.toml"
        cfg_path.write_text(_to_toml(config))
        res = CliRunner().invoke(
            main,
            ["search", "--config", str(cfg_path), "--output-dir", str(tmp_path), "--budget", "2"],
        )
        assert res.exit_code == 0, res.output
        assert (tmp_path / "search_trials.json").exists()

    def test_missing_dataset_file_errors(self, tmp_path):
        config = deep({"dataset": {"kind": "csv", "path": str(tmp_path / "nope.csv")}})
        with pytest.raises(FileNotFoundError):
            run_experiment(config, output_dir=tmp_path)


def _to_toml(cfg: dict) -> str:
    """Minimal TOML writer sufficient for the nested config dicts in tests."""
    lines = []

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    def emit(table, prefix=""):
        scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
        subs = {k: v for k, v in table.items() if isinstance(v, dict)}
        if prefix:
            lines.append(f"[{prefix}]")
        for k, v in scalars.items():
            lines.append(f"{k} = {fmt(v)}")
        for k, v in subs.items():
            emit(v, f"{prefix}.{k}" if prefix else k)

    emit(cfg)
    return "\n".join(lines) + "\n"

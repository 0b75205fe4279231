import json

import pytest
import yaml

from sm2.cli import EXIT_ALL_DIVERGED, EXIT_CONFIG, EXIT_LEDGER, EXIT_OK, main
from sm2.config import (build_settings, effective_yaml, fingerprint, load_config, parse_config,
                        with_overrides)
from sm2.core import ConfigError, FinalSelection, RunLedger

SMALL = {
    "run": {"seed": 2, "stop": {"max_rounds": 3}},
    "data": {"kind": "TwoGaussians", "n_samples": 8192, "input_dim": 4},
    "lr_grid": {"count": 7},
    "batch_candidates": [16, 32, 64, 128],
}


def write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestConfigSchema:
    def test_defaults(self):
        cfg = parse_config("run: {}")
        assert cfg.batch_candidates == [8, 16, 32, 64, 128, 256, 512, 1024]
        assert (cfg.objective.alpha, cfg.objective.beta) == (0.75, 0.5)
        assert (cfg.lr_grid.lr_min, cfg.lr_grid.lr_max, cfg.lr_grid.count) == (0.001, 1.0, 20)
        assert cfg.budget.exploration_fraction == 0.25

    def test_alpha_bound(self):
        with pytest.raises(ConfigError, match="objective.alpha"):
            parse_config("objective: {alpha: 1.5}")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("budget: {epochs: 3}")

    def test_empty(self):
        with pytest.raises(ConfigError, match="empty"):
            parse_config("")

    def test_divisibility(self):
        with pytest.raises(ConfigError, match="not a multiple"):
            parse_config("batch_candidates: [8, 12]")

    def test_grid_vs_window(self):
        with pytest.raises(ConfigError):
            parse_config("lr_grid: {count: 5, window: 5}")

    def test_csv_needs_path(self):
        with pytest.raises(ConfigError, match="data.path"):
            parse_config("data: {kind: csv}")

    def test_csv_path_relative_to_config(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,target\n1,2\n")
        cfg = load_config(write(tmp_path, {"data": {"kind": "csv", "path": "d.csv"}}))
        assert cfg.data.path == str(tmp_path / "d.csv")

    def test_missing_csv(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(write(tmp_path, {"data": {"kind": "csv", "path": "nope.csv"}}))

    def test_effective_yaml_origins(self):
        text = effective_yaml(parse_config("objective: {alpha: 0.5}"), "objective: {alpha: 0.5}")
        assert "alpha: 0.5  # set in file" in text
        assert "beta: 0.5  # reference setup default" in text
        assert "poll_interval_s: 0.1  # artifact default" in text
        grid_line = [line for line in text.splitlines() if line.startswith("# lr grid:")][0]
        assert len(grid_line.split(":", 1)[1].split(",")) == 20

    def test_fingerprint_ignores_objective(self):
        a = parse_config("objective: {alpha: 1.0}")
        b = parse_config("objective: {alpha: 0.75}")
        assert fingerprint(a, 0) == fingerprint(b, 0)
        assert fingerprint(a, 0) != fingerprint(a, 1)

    def test_overrides(self):
        cfg = with_overrides(parse_config("run: {seed: 1}"), seed=9, alpha=1.0)
        assert cfg.run.seed == 9 and cfg.objective.alpha == 1.0
        with pytest.raises(ConfigError):
            with_overrides(cfg, alpha=2.0)

    def test_settings_default_rounds(self):
        cfg = parse_config("run: {}")
        assert build_settings(cfg, 0, 8).budget.max_rounds == 5


class TestRun:
    def test_run_writes_outputs(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", "--config", str(write(tmp_path, SMALL)), "--out", str(out)]) == EXIT_OK
        ledger = RunLedger.read(out / "ledger.jsonl")
        assert len(ledger.of_type(FinalSelection)) == 1
        for name in ("summary.txt", "traces.png", "exploration_round0.png", "effective_config.yaml",
                     "trace_config0.csv", "explore_round0_config0.csv"):
            assert (out / name).exists(), name
        assert "total energy" in capsys.readouterr().out

    def test_alpha_out_of_range(self, tmp_path, capsys):
        cfg = dict(SMALL, objective={"alpha": 1.5})
        assert main(["run", "--config", str(write(tmp_path, cfg))]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "objective.alpha" in err and "1" in err

    def test_missing_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.yaml")]) == EXIT_CONFIG

    def test_missing_data_file(self, tmp_path):
        cfg = dict(SMALL, data={"kind": "csv", "path": "missing.csv"})
        assert main(["run", "--config", str(write(tmp_path, cfg))]) == EXIT_CONFIG

    def test_partition_too_small(self, tmp_path, capsys):
        cfg = dict(SMALL, batch_candidates=[16, 2048])
        assert main(["run", "--config", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "exploration batches" in capsys.readouterr().err

    def test_all_diverged_exit(self, tmp_path):
        cfg = dict(SMALL, lr_grid={"count": 7, "lr_min": 1e6, "lr_max": 1e9})
        assert main(["run", "--config", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o"),
                     "--no-figures"]) == EXIT_ALL_DIVERGED

    def test_vanilla_needs_args(self, tmp_path):
        assert main(["run", "--config", str(write(tmp_path, SMALL)), "--vanilla"]) == EXIT_CONFIG


class TestValidate:
    def test_minimal(self, tmp_path, capsys):
        assert main(["validate", "--config", str(write(tmp_path, {"run": {"seed": 0}}))]) == EXIT_OK
        out = capsys.readouterr().out
        assert "lr grid" in out and "batch_candidates" in out

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.yaml"
        p.write_text("")
        assert main(["validate", "--config", str(p)]) == EXIT_CONFIG

    def test_divisibility(self, tmp_path, capsys):
        assert main(["validate", "--config", str(write(tmp_path, {"batch_candidates": [8, 12]}))]) == EXIT_CONFIG
        assert "multiple" in capsys.readouterr().err

    def test_power_model_override(self, tmp_path, capsys):
        pm = tmp_path / "pm.yaml"
        pm.write_text("energy: {p_max: 400}")
        assert main(["validate", "--config", str(write(tmp_path, SMALL)), "--power-model", str(pm)]) == EXIT_OK
        assert "p_max: 400" in capsys.readouterr().out


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cmp")
    cfg = write(root, SMALL)
    assert main(["run", "--config", str(cfg), "--out", str(root / "sm2"), "--no-figures"]) == EXIT_OK
    assert main(["run", "--config", str(cfg), "--out", str(root / "a1"), "--alpha", "1.0",
                 "--no-figures"]) == EXIT_OK
    assert main(["run", "--config", str(cfg), "--out", str(root / "van"), "--vanilla", "--batch-size", "64",
                 "--lr", "0.05", "--no-figures"]) == EXIT_OK
    return root


class TestReportAndCompare:
    def test_report_regenerates(self, runs, tmp_path):
        assert main(["report", "--ledger", str(runs / "sm2" / "ledger.jsonl"), "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "summary.txt").read_bytes() == (runs / "sm2" / "summary.txt").read_bytes()
        assert (tmp_path / "traces.png").exists()

    def test_compare(self, runs, tmp_path, capsys):
        args = ["compare", "--alpha1", str(runs / "a1" / "ledger.jsonl"), "--sm2", str(runs / "sm2" / "ledger.jsonl"),
                "--vanilla", str(runs / "van" / "ledger.jsonl"), "--name", "toy", "--out", str(tmp_path)]
        assert main(args) == EXIT_OK
        assert "toy" in capsys.readouterr().out
        assert (tmp_path / "comparison.csv").exists()

    def test_compare_mismatch(self, runs, tmp_path):
        other = dict(SMALL, run={"seed": 5, "stop": {"max_rounds": 3}})
        out = tmp_path / "other"
        assert main(["run", "--config", str(write(tmp_path, other)), "--out", str(out), "--no-figures"]) == EXIT_OK
        args = ["compare", "--alpha1", str(out / "ledger.jsonl"), "--sm2", str(runs / "sm2" / "ledger.jsonl"),
                "--vanilla", str(runs / "van" / "ledger.jsonl")]
        assert main(args) == EXIT_LEDGER

    def test_bad_ledger(self, tmp_path):
        p = tmp_path / "l.jsonl"
        p.write_text(json.dumps({"type": "Mystery"}) + "\n")
        assert main(["report", "--ledger", str(p), "--out", str(tmp_path / "r")]) == EXIT_LEDGER


@pytest.mark.slow
class TestDefaultConfig:
    def test_default_run(self, tmp_path):
        cfg = {"run": {"seed": 0}, "data": {"kind": "TwoGaussians"}}
        out = tmp_path / "o"
        assert main(["run", "--config", str(write(tmp_path, cfg)), "--out", str(out), "--no-figures"]) == EXIT_OK
        assert len(RunLedger.read(out / "ledger.jsonl").of_type(FinalSelection)) == 1

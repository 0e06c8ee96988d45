import json
import subprocess
import sys

import pytest

from celltwin.cli import main, parse_config
from celltwin.errors import ConfigError


def write_config(tmp_path, **overrides):
    cfg = {
        "scenario": {"preset": "hex7", "seed": 0, "grid_dim": 4, "horizon_hours": 240},
        "out_dir": str(tmp_path / "out"),
        "seeds": [0, 1],
        "dataset": {"n_days": 3},
        "worldmodel": {"train_steps": 120, "expert_hidden": [16], "gate_hidden": [8]},
        "agent": {"updates": 4, "episodes_per_update": 2,
                  "env": {"day_pool": 4, "rsrp_pool": 2, "rsrp_draws": 2}},
        "evaluation": {"schemes": ["empirical", "custom", "greedy"], "n_gen_samples": 6},
        "counterfactual": {"fractions": [0.8], "adapt_steps": 20, "adapt_days": 2},
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestParseConfig:
    def test_minimal_config_fills_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{}")
        run = parse_config(str(path))
        assert run.effective["dataset"]["n_days"] == 16
        assert run.seeds == (0, 1, 2, 3, 4)
        assert run.scenario.n_cells == 7

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"foo": 1}')
        with pytest.raises(ConfigError, match="foo"):
            parse_config(str(path))

    def test_nested_unknown_key_named(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"dataset": {"n_day": 4}}')
        with pytest.raises(ConfigError, match="dataset.n_day"):
            parse_config(str(path))

    def test_hash_stable_under_key_reordering(self, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        a.write_text('{"seeds": [1, 2], "out_dir": "x"}')
        b.write_text('{"out_dir": "x", "seeds": [1, 2]}')
        assert parse_config(str(a)).config_hash == parse_config(str(b)).config_hash

    def test_hash_covers_scenario_content(self, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        a.write_text('{"scenario": {"preset": "hex7", "seed": 1}}')
        b.write_text('{"scenario": {"preset": "hex7", "seed": 2}}')
        assert parse_config(str(a)).config_hash != parse_config(str(b)).config_hash

    def test_scenario_by_path(self, tmp_path):
        from celltwin.scenario import make_hex_scenario, save_scenario

        scen_path = tmp_path / "scenario.json"
        save_scenario(make_hex_scenario(seed=9), str(scen_path))
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"scenario": "scenario.json"}))
        run = parse_config(str(cfg))
        assert run.scenario.seed == 9

    def test_empty_seeds_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"seeds": []}')
        with pytest.raises(ConfigError, match="seeds"):
            parse_config(str(path))

    def test_out_root_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CELLTWIN_OUT_ROOT", str(tmp_path / "root"))
        path = tmp_path / "c.json"
        path.write_text('{"out_dir": "runs"}')
        run = parse_config(str(path))
        assert str(run.out_dir) == str(tmp_path / "root" / "runs")


class TestCliCommands:
    def test_simulate_row_count(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "traffic.csv"
        assert main(["simulate", "--config", cfg, "--days", "1", "--out", str(out)]) == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "cell_id,t_hours,load_mbps"
        assert len(lines) - 1 == 7 * 12

    def test_unknown_flag_exits_two(self, tmp_path):
        cfg = write_config(tmp_path)
        proc = subprocess.run(
            [sys.executable, "-m", "celltwin.cli", "simulate", "--config", cfg, "--bogus"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2
        assert "usage" in proc.stderr.lower()

    def test_unknown_command_exits_two(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "celltwin.cli", "frobnicate", "--config", "x"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2

    def test_bad_config_exits_one(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text('{"foo": 1}')
        assert main(["collect", "--config", str(path)]) == 1
        assert "foo" in capsys.readouterr().err

    def test_missing_models_exit_one(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["eval-gen", "--config", cfg]) == 1
        assert "error" in capsys.readouterr().err


@pytest.mark.slow
class TestPipelineEndToEnd:
    def test_stages_chain_and_reports_reproduce(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        for command in ("collect", "train-wm", "optimize"):
            assert main([command, "--config", cfg]) == 0, command
        assert main(["evaluate", "--config", cfg]) == 0
        report = tmp_path / "out" / "reports" / "evaluation.csv"
        first = report.read_bytes()
        assert main(["evaluate", "--config", cfg]) == 0
        assert report.read_bytes() == first  # bit-identical rerun
        assert main(["report", "--config", cfg]) == 0
        summary_rows = (tmp_path / "out" / "reports" / "summary.csv").read_text().strip().split("\n")
        emp = [r for r in summary_rows if r.startswith("empirical")]
        assert len(emp) == 1  # one aggregate row per scheme, covering both seeds
        assert ",2," in emp[0]
        manifest = json.loads((tmp_path / "out" / "reports" / "evaluation_manifest.json").read_text())
        assert manifest["config_hash"] == parse_config(cfg).config_hash
        assert manifest["seeds"] == [0, 1]

    def test_evaluate_with_agent_and_jobs(self, tmp_path):
        cfg = write_config(
            tmp_path,
            evaluation={"schemes": ["agent", "empirical"], "n_gen_samples": 4},
        )
        for command in ("collect", "train-wm", "optimize"):
            assert main([command, "--config", cfg]) == 0, command
        assert main(["evaluate", "--config", cfg]) == 0
        sequential = (tmp_path / "out" / "reports" / "evaluation.csv").read_bytes()
        assert main(["evaluate", "--config", cfg, "--jobs", "2"]) == 0
        parallel = (tmp_path / "out" / "reports" / "evaluation.csv").read_bytes()
        assert sequential == parallel

"""Tests for the command-line runner and its output files."""

import csv
import json
import math

import pytest

from roadside_irs import cli
from roadside_irs.config import parse_experiment_text

SPEC = """\
scenario:
  m_x: 4
  m_y: 4
  n_b: 4
  d_irs: 1.0
  n0: 10
  search_grid: 32
sweep:
  param: tau
  values: [6, 10]
schemes: [proposed, no_irs]
n_runs: 2
"""


@pytest.fixture
def spec_file(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text(SPEC)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestRun:
    def test_table_and_sidecar(self, spec_file, tmp_path):
        out = tmp_path / "res" / "table.csv"
        assert cli.main(["run", str(spec_file), "--out", str(out)]) == 0
        rows = read_csv(out)
        assert list(rows[0]) == list(cli.COLUMNS)
        assert [(r["sweep_value"], r["scheme"]) for r in rows] == [("6", "proposed"), ("6", "no_irs"), ("10", "proposed"), ("10", "no_irs")]
        assert all(r["runs"] == "2" for r in rows)
        assert math.isnan(float(rows[1]["angle_rmse"]))
        side = json.loads(out.with_suffix(".json").read_text())
        assert side["columns"] == list(cli.COLUMNS)
        assert side["failures"] == []
        assert side["spec"]["sweep"] == {"param": "tau", "values": [6, 10]}
        assert "traces" not in side

    def test_single_point_single_run(self, tmp_path):
        p = tmp_path / "one.yaml"
        p.write_text("scenario: {m_x: 4, m_y: 4, n_b: 4, d_irs: 0.5, n0: 10, search_grid: 32}\nschemes: [no_irs]\nn_runs: 1\n")
        out = tmp_path / "one.csv"
        assert cli.main(["run", str(p), "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 1
        assert rows[0]["sweep_param"] == "none" and rows[0]["sweep_value"] == ""

    def test_trace(self, spec_file, tmp_path):
        out = tmp_path / "t.csv"
        assert cli.main(["run", str(spec_file), "--out", str(out), "--trace", "--runs", "1"]) == 0
        side = json.loads(out.with_suffix(".json").read_text())
        trace = side["traces"]["tau=6"]["proposed"]
        assert len(trace["rate_per_block"]) == len(trace["gamma_per_block"]) > 0
        assert len(trace["run_mean_rates"]) == 1

    def test_byte_identical_reruns(self, spec_file, tmp_path):
        outs = []
        for i, workers in enumerate(("1", "2")):
            out = tmp_path / f"r{i}.csv"
            assert cli.main(["run", str(spec_file), "--out", str(out), "--seed", "5", "--workers", workers]) == 0
            outs.append(out)
        assert outs[0].read_bytes() == outs[1].read_bytes()
        assert outs[0].with_suffix(".json").read_bytes() == outs[1].with_suffix(".json").read_bytes()

    def test_seed_changes_output(self, spec_file, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        cli.main(["run", str(spec_file), "--out", str(a), "--seed", "1"])
        cli.main(["run", str(spec_file), "--out", str(b), "--seed", "2"])
        assert a.read_bytes() != b.read_bytes()

    def test_env_overrides(self, spec_file, tmp_path, monkeypatch):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        cli.main(["run", str(spec_file), "--out", str(a), "--seed", "7"])
        monkeypatch.setenv("ROADSIDE_IRS_SEED", "7")
        monkeypatch.setenv("ROADSIDE_IRS_WORKERS", "2")
        cli.main(["run", str(spec_file), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()
        assert json.loads(b.with_suffix(".json").read_text())["spec"]["scenario"]["seed"] == 7

    def test_failure_rows_kept(self, spec_file, tmp_path, monkeypatch):
        real = cli.monte_carlo

        def flaky(cfg, *args, **kwargs):
            if cfg.tau == 10:
                raise RuntimeError("boom")
            return real(cfg, *args, **kwargs)

        monkeypatch.setattr(cli, "monte_carlo", flaky)
        out = tmp_path / "f.csv"
        assert cli.main(["run", str(spec_file), "--out", str(out)]) == 2
        rows = read_csv(out)
        assert len(rows) == 4
        assert rows[0]["runs"] == "2" and rows[2]["runs"] == "0"
        assert math.isnan(float(rows[2]["mean_rate_bps_hz"]))
        side = json.loads(out.with_suffix(".json").read_text())
        assert side["failures"] == [{"sweep_value": 10, "error": "RuntimeError: boom"}]


class TestErrors:
    def test_config_error_exit(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("scenario:\n  tau: lots\n")
        assert cli.main(["run", str(p)]) == 1
        assert "line 2" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert cli.main(["validate", str(tmp_path / "missing.yaml")]) == 1

    def test_bad_runs(self, spec_file):
        assert cli.main(["run", str(spec_file), "--runs", "0"]) == 1

    def test_bad_env(self, spec_file, monkeypatch):
        monkeypatch.setenv("ROADSIDE_IRS_SEED", "abc")
        assert cli.main(["run", str(spec_file)]) == 1

    def test_usage_error(self):
        with pytest.raises(SystemExit):
            cli.main([])


class TestInspection:
    def test_defaults_round_trip(self, capsys):
        assert cli.main(["defaults"]) == 0
        text = capsys.readouterr().out
        assert "carrier_frequency: 5900000000.0" in text
        assert parse_experiment_text(text) == parse_experiment_text("")

    def test_validate_prints_resolved_spec(self, spec_file, capsys):
        assert cli.main(["validate", str(spec_file)]) == 0
        assert parse_experiment_text(capsys.readouterr().out) == parse_experiment_text(SPEC)

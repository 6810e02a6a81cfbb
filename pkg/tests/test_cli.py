import json
from pathlib import Path

import pytest
import yaml

from icefree.cli import main
from icefree.data import read_trial_csv
from icefree.simulator import default_scenario, simulate_trial


def write_cfg(tmp_path, payload, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(payload))
    return str(path)


def simulate_csv(tmp_path, **kw):
    ds, _ = simulate_trial(default_scenario(n=kw.pop("n", 120), seed=kw.pop("seed", 0), **kw))
    path = tmp_path / "trial.csv"
    ds.frame.to_csv(path, index=False)
    return str(path)


class TestSimulate:
    def test_round_trip_and_exit_zero(self, tmp_path):
        cfg = write_cfg(tmp_path, {"seed": 5, "simulate": {"scenario": "default", "n": 80}})
        out = tmp_path / "sim"
        assert main(["simulate", "-c", cfg, "-o", str(out)]) == 0
        ds = read_trial_csv(out / "trial.csv")
        assert ds.n == 80
        record = json.loads((out / "run.json").read_text())
        assert record["seed"] == 5
        assert "version" in record

    def test_byte_identical_reruns(self, tmp_path):
        cfg = write_cfg(tmp_path, {"seed": 9, "simulate": {"n": 60}})
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["simulate", "-c", cfg, "-o", str(out1)])
        main(["simulate", "-c", cfg, "-o", str(out2)])
        assert (out1 / "trial.csv").read_bytes() == (out2 / "trial.csv").read_bytes()
        assert (out1 / "truth.csv").read_bytes() == (out2 / "truth.csv").read_bytes()

    def test_unknown_scenario_is_config_error(self, tmp_path):
        cfg = write_cfg(tmp_path, {"simulate": {"scenario": "nope"}})
        assert main(["simulate", "-c", cfg, "-o", str(tmp_path / "x")]) == 2


class TestAnalyze:
    def test_method1_on_simulated_data(self, tmp_path, capsys):
        data = simulate_csv(tmp_path, n=150)
        cfg = write_cfg(tmp_path, {"seed": 1, "analysis": {"methods": [0, 1]}})
        out = tmp_path / "res"
        assert main(["analyze", data, "-c", cfg, "-o", str(out)]) == 0
        text = (out / "results.csv").read_text()
        assert "effect" in text
        printed = capsys.readouterr().out
        assert "Minutes" in printed and "Effect (SE)" in printed

    def test_unknown_method_id_exits_2(self, tmp_path):
        data = simulate_csv(tmp_path)
        cfg = write_cfg(tmp_path, {"analysis": {"methods": [18]}})
        assert main(["analyze", data, "-c", cfg, "-o", str(tmp_path / "x")]) == 2

    def test_ice_mode_mismatch_exits_2(self, tmp_path):
        data = simulate_csv(tmp_path)
        cfg = write_cfg(tmp_path, {"analysis": {"methods": [1], "ice_mode": "categorical"}})
        assert main(["analyze", data, "-c", cfg, "-o", str(tmp_path / "x")]) == 2

    def test_schema_violation_exits_3(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("id,arm\n1,0\n")
        cfg = write_cfg(tmp_path, {"analysis": {"methods": [1]}})
        assert main(["analyze", str(bad), "-c", cfg, "-o", str(tmp_path / "x")]) == 3

    def test_byte_identical_results(self, tmp_path):
        data = simulate_csv(tmp_path, n=100)
        cfg = write_cfg(tmp_path, {"seed": 3, "analysis": {"methods": [1, 2], "m": 4}})
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["analyze", data, "-c", cfg, "-o", str(out1)])
        main(["analyze", data, "-c", cfg, "-o", str(out2)])
        assert (out1 / "results.csv").read_bytes() == (out2 / "results.csv").read_bytes()
        assert (out1 / "results.json").read_bytes() == (out2 / "results.json").read_bytes()

    def test_all_17_rows_layout(self, tmp_path, capsys):
        data = simulate_csv(tmp_path, n=90, seed=4)
        cfg = write_cfg(tmp_path, {
            "seed": 2,
            "analysis": {"methods": list(range(1, 18)), "m": 2, "b": 4,
                         "copies": 2, "gformula_b": 4}})
        out = tmp_path / "all"
        assert main(["analyze", data, "-c", cfg, "-o", str(out)]) == 0
        import pandas as pd

        table = pd.read_csv(out / "results.csv")
        assert len(table) == 17
        assert list(table.columns) == [
            "method_id", "label", "arm1_mean", "arm1_se",
            "arm0_mean", "arm0_se", "effect", "effect_se"]


class TestReplicate:
    def test_small_study_threads_byte_identical(self, tmp_path):
        cfg = write_cfg(tmp_path, {
            "seed": 7,
            "replicate": {"scenario": "default", "n": 60, "r": 3, "methods": [0, 1]},
            "analysis": {"m": 2, "b": 4}})
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        assert main(["replicate", "-c", cfg, "-o", str(out1)]) == 0
        cfg2 = write_cfg(tmp_path, {
            "seed": 7, "threads": 2,
            "replicate": {"scenario": "default", "n": 60, "r": 3, "methods": [0, 1]},
            "analysis": {"m": 2, "b": 4}}, name="cfg2.yaml")
        assert main(["replicate", "-c", cfg2, "-o", str(out2)]) == 0
        assert (out1 / "study.csv").read_bytes() == (out2 / "study.csv").read_bytes()
        assert (out1 / "study_raw.csv").read_bytes() == (out2 / "study_raw.csv").read_bytes()


class TestDiagnose:
    def test_counts_nonzero_on_default_scenario(self, tmp_path, capsys):
        data = simulate_csv(tmp_path, n=800, seed=6)
        out = tmp_path / "diag"
        assert main(["diagnose", data, "-o", str(out)]) == 0
        import pandas as pd

        summary = pd.read_csv(out / "positivity_summary.csv")
        above = summary["n_above_threshold_at_risk"].sum()
        noninit = summary["n_above_not_initiating"].sum()
        assert above > 0
        assert noninit > 0

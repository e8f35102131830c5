import csv
import filecmp
import json
import os
import subprocess
import sys

import pytest

from acvtune.cli import main


def _config(tmp_path, **run):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"benchmark": "trajectory-1d", "run": {"reference_log2": 10, **run}}))
    return str(path)


def _same_dirs(a, b):
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b))
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors, mismatch
    return names


def test_estimate_writes_reports_within_budget(tmp_path, capsys):
    out = tmp_path / "o"
    rc = main(["estimate", "--budget", "600", "--n-pilot", "30", "--n-iter", "4", "--seed", "7", "--out", str(out)])
    assert rc == 0
    names = set(os.listdir(out))
    assert {"manifest.json", "report.json", "tuning_trace.csv", "online_trace.csv"} <= names
    rep = json.loads((out / "report.json").read_text())
    assert rep["ledger"]["charged"] <= 600 + 1e-9
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 7 and man["run"]["budget"] == 600 and "version" in man and "physics" in man
    assert "estimate" in capsys.readouterr().out


def test_manifest_replay_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["estimate", "--budget", "500", "--n-pilot", "25", "--n-iter", "3", "--seed", "2",
                 "--out", str(a)]) == 0
    assert main(["estimate", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    _same_dirs(a, b)


def test_infeasible_budget_exit_code(tmp_path, capsys):
    rc = main(["estimate", "--budget", "5", "--n-pilot", "50", "--out", str(tmp_path)])
    assert rc == 1
    assert "ledger" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["estimate", "--budget", "-3"],
    ["estimate", "--scheme", "XYZ"],
    ["estimate", "--benchmark", "nope"],
    ["estimate", "--config", "/nonexistent/cfg.json"],
    ["estimate", "--benchmark", "trajectory-2d", "--n-iter", "5"],
    ["baseline", "--kind", "BestCase"],
    ["sweep", "--budgets", ""],
    ["frobnicate"],
])
def test_configuration_errors_exit_two(tmp_path, argv):
    assert main(argv + ["--out", str(tmp_path)] if argv[0] != "frobnicate" else argv) == 2


def test_env_var_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv("ACVTUNE_OUT", str(tmp_path / "env"))
    assert main(["tune", "--budget", "500", "--n-pilot", "20", "--n-iter", "3"]) == 0
    assert (tmp_path / "env" / "tuning.json").exists()


def test_baseline_is_independent_of_jobs(tmp_path):
    cfg = _config(tmp_path)
    outs = []
    for jobs in (1, 2):
        out = tmp_path / f"j{jobs}"
        assert main(["baseline", "--config", cfg, "--kind", "HandSelected", "--budget", "300", "--n-pilot", "20",
                     "--n-trial", "3", "--seed", "4", "--jobs", str(jobs), "--out", str(out)]) == 0
        outs.append(out)
    names = _same_dirs(*outs)
    assert "trials.csv" in names and "summary.json" in names


def test_grid_then_best_case_baseline(tmp_path):
    cfg = _config(tmp_path, n_ref=800, grid_points=4)
    g = tmp_path / "g"
    assert main(["grid", "--config", cfg, "--budget", "300", "--out", str(g)]) == 0
    data = json.loads((g / "grid.json").read_text())
    assert len(data["axes"][0]) == 4 and data["argmin"]
    with open(g / "grid.csv") as fh:
        assert len(list(csv.reader(fh))) == 5
    out = tmp_path / "b"
    assert main(["baseline", "--config", cfg, "--kind", "BestCase", "--budget", "300", "--n-trial", "2",
                 "--grid", str(g / "grid.json"), "--out", str(out)]) == 0


def test_single_cell_sweep_matches_estimate(tmp_path):
    cfg = _config(tmp_path)
    sw, est = tmp_path / "s", tmp_path / "e"
    assert main(["sweep", "--config", cfg, "--budgets", "400", "--n-pilots", "20", "--n-iters", "3",
                 "--kinds", "Tuned", "--n-trial", "1", "--seed", "5", "--out", str(sw)]) == 0
    assert main(["estimate", "--config", cfg, "--budget", "400", "--n-pilot", "20", "--n-iter", "3",
                 "--seed", "5", "--out", str(est)]) == 0
    with open(sw / "trials.csv") as fh:
        row = next(csv.DictReader(fh))
    rep = json.loads((est / "report.json").read_text())
    assert float(row["qtilde"]) == rep["qtilde"]
    assert float(row["overhead"]) == rep["ledger"]["overhead"]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "acvtune", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "acvtune" in res.stdout

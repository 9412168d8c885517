from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from evagg.cli import main
from evagg.harness import import_trace


def toy_config(tmp_path, **scenario_extra):
    scenario = {
        "fleet_size_mean": 6,
        "night_epochs": 8,
        "epoch_minutes": 15.0,
        "wind_active_epochs": 6,
        "wind_cap_kw": 3.0,
        "wind_noise_kw": 1.0,
        "rng_seed": 4,
        "groups": [
            {"shape": "rectangular", "peak_kw": 2.0, "max_duration_hours": 0.5,
             "soc_mu": 0.0, "soc_sigma": 0.6}
        ],
    }
    scenario.update(scenario_extra)
    doc = {
        "version": 1,
        "scheduler": "spuc-static",
        "scenario": scenario,
        "mpc": {"solver_mode": "exact"},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_run_writes_trace_files(tmp_path, capsys):
    cfg = toy_config(tmp_path)
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    trace = import_trace(out / "trace_spuc-static.csv")
    assert trace.scheduler == "spuc-static"
    assert trace.n_epochs == 8
    assert trace.qos_completion_fraction == 1.0
    captured = capsys.readouterr().out
    assert "trace_spuc-static.csv" in captured
    assert "qos=1.0000" in captured


def test_run_scheduler_and_seed_overrides(tmp_path):
    cfg = toy_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--scheduler", "mpc",
                 "--seed", "9", "--out", str(out)]) == 0
    trace = import_trace(out / "trace_mpc.csv")
    assert trace.scheduler == "mpc"
    base = import_trace_after_run(cfg, out / "b", ["--scheduler", "mpc"])
    assert trace.scenario_fingerprint != base.scenario_fingerprint


def import_trace_after_run(cfg, out, extra):
    assert main(["run", "--config", str(cfg), "--out", str(out)] + extra) == 0
    (path,) = sorted(out.glob("trace_*.csv"))
    return import_trace(path)


def test_spuc_updated_reuses_mpc_trace(tmp_path):
    cfg = toy_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--scheduler", "mpc",
                 "--out", str(out)]) == 0
    assert main(["run", "--config", str(cfg), "--scheduler", "spuc-updated",
                 "--out", str(out)]) == 0
    mpc = import_trace(out / "trace_mpc.csv")
    upd = import_trace(out / "trace_spuc-updated.csv")
    assert np.array_equal(upd.purchase_kw, mpc.purchase_kw)


def test_compare_prints_table(tmp_path, capsys):
    cfg = toy_config(tmp_path)
    out = tmp_path / "out"
    for scheduler in ("mpc", "spuc-static", "spuc-updated"):
        assert main(["run", "--config", str(cfg), "--scheduler", scheduler,
                     "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["compare", "--in", str(out)]) == 0
    table = capsys.readouterr().out
    assert "scheduler" in table
    assert "spuc-static" in table
    assert "deviation ordering" in table


def test_wind_csv_source(tmp_path):
    cfg = toy_config(tmp_path)
    wind_path = tmp_path / "wind.csv"
    with open(wind_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "a_kw"])
        for t in range(1, 9):
            w.writerow([t, 0.25 * t])
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--wind", f"csv:{wind_path}",
                 "--out", str(out)]) == 0
    trace = import_trace(out / "trace_spuc-static.csv")
    assert np.allclose(trace.dispatch_kw, 0.25 * np.arange(1, 9))


def test_gen_scenario_writes_summary(tmp_path, capsys):
    cfg = toy_config(tmp_path)
    out = tmp_path / "scenario.json"
    assert main(["gen-scenario", "--config", str(cfg), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["version"] == 1
    assert doc["night_epochs"] == 8
    assert doc["total_evs"] == sum(c for _, _, c in doc["fleet"])
    assert len(doc["wind_kw"]) == 8
    assert "fingerprint" in doc
    assert "wrote" in capsys.readouterr().out


def test_cli_error_paths(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["run", "--config", str(missing), "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err
    cfg = toy_config(tmp_path)
    assert main(["run", "--config", str(cfg), "--wind", "guess",
                 "--out", str(tmp_path / "o")]) == 1
    assert "--wind" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["run", "--config", str(cfg)])  # --out is required

"""Command-line interface: subcommands, exit codes, artifacts."""

import json
import os

import pytest

from contractmpc import load_certificate
from contractmpc.cli import (
    EXIT_CONFIG,
    EXIT_EMPTY,
    EXIT_INFEASIBLE,
    EXIT_NO_HORIZON,
    EXIT_OK,
    main,
)

from .reference_tables import NONHOLONOMIC_TABLE


def _invoke(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    kv = {}
    for line in captured.out.splitlines():
        key, _, value = line.partition("=")
        kv[key] = value
    return code, kv, captured.err


# ---------------------------------------------------------------------------
# tighten
# ---------------------------------------------------------------------------

def test_tighten_writes_published_table(tmp_path, capsys):
    code, kv, err = _invoke(capsys, "tighten", "--preset", "nonholonomic",
                            "--out-dir", str(tmp_path))
    assert code == EXIT_OK
    assert kv["plant"] == "nonholonomic"
    assert kv["rows"] == "11"
    assert kv["decimals"] == "1"
    assert kv["max_feasible_horizon"] == "10"
    lines = (tmp_path / "nonholonomic_tightening.csv").read_text().splitlines()
    assert lines == [",".join(row) for row in NONHOLONOMIC_TABLE]
    assert "wrote per-step bound sequences" in err


def test_tighten_empty_constraints_exit(tmp_path, capsys):
    cfg = tmp_path / "big_noise.json"
    cfg.write_text(json.dumps({
        "plant": {"dynamics": "deadbeat_toy",
                  "dist_box": {"lo": [-5.0], "hi": [5.0]}},
        "n_max": 3,
    }))
    code, kv, err = _invoke(capsys, "tighten", "--config", str(cfg),
                            "--out-dir", str(tmp_path))
    assert code == EXIT_EMPTY
    assert "already empty at the first step" in err
    assert kv == {}


# ---------------------------------------------------------------------------
# certify
# ---------------------------------------------------------------------------

def test_certify_toy_saves_certificate(tmp_path, capsys):
    code, kv, _ = _invoke(capsys, "certify", "--preset", "deadbeat_toy",
                          "--grid", "smoke", "--out-dir", str(tmp_path))
    assert code == EXIT_OK
    assert kv["plant"] == "deadbeat_toy"
    assert float(kv["omega"]) == pytest.approx(1.99**2, abs=1e-9)
    assert float(kv["gamma_max"]) == pytest.approx(4.0)
    assert kv["N_p"] == "1"
    assert float(kv["gamma"]) == pytest.approx(0.0, abs=1e-9)
    assert float(kv["gamma_1"]) == float(kv["gamma"])
    cert = load_certificate(tmp_path / "deadbeat_toy_certificate.json")
    assert cert.N_p == 1


def test_certify_config_plant_and_grid(tmp_path, capsys):
    cfg = tmp_path / "custom.json"
    cfg.write_text(json.dumps({
        "plant": {"dynamics": "deadbeat_toy"},
        "n_max": 3,
        "P_gamma": [[1.0]],
        "rcis": {"type": "box", "lo": [-2.0], "hi": [2.0]},
        "grid": {"points_per_axis": 7},
    }))
    code, kv, _ = _invoke(capsys, "certify", "--config", str(cfg),
                          "--out-dir", str(tmp_path))
    assert code == EXIT_OK
    assert kv["plant"] == "deadbeat_toy"
    assert (tmp_path / "deadbeat_toy_certificate.json").exists()


def test_certify_no_qualifying_horizon_exit(tmp_path, capsys):
    cfg = tmp_path / "short.json"
    cfg.write_text(json.dumps({"preset": "nonholonomic", "n_max": 2}))
    code, kv, err = _invoke(capsys, "certify", "--config", str(cfg),
                            "--grid", "smoke", "--out-dir", str(tmp_path))
    assert code == EXIT_NO_HORIZON
    assert "certificate unavailable" in err
    assert kv == {}


# ---------------------------------------------------------------------------
# run / report
# ---------------------------------------------------------------------------

def test_run_and_report_round_trip(tmp_path, capsys):
    code, kv, _ = _invoke(capsys, "run", "--preset", "deadbeat_toy",
                          "--runs", "3", "--steps", "4", "--out-dir", str(tmp_path))
    assert code == EXIT_OK
    assert kv["runs"] == "3" and kv["steps"] == "4"
    assert kv["violations"] == "0" and kv["faults"] == "0"
    for i in range(3):
        assert (tmp_path / f"deadbeat_toy_trace_{i:03d}.csv").exists()
    assert (tmp_path / "deadbeat_toy_report.json").exists()

    code, kv, _ = _invoke(capsys, "report", "--out-dir", str(tmp_path),
                          "--report-name", "deadbeat_toy_report.json")
    assert code == EXIT_OK
    assert kv["n_runs"] == "3"
    assert kv["violations"] == "0"
    assert kv["runs_final_gamma_below_omega"] == "3"
    assert float(kv["final_dist_inf_max"]) < 0.1


def test_run_enumerated_formulation(tmp_path, capsys):
    code, kv, _ = _invoke(capsys, "run", "--preset", "deadbeat_toy",
                          "--runs", "1", "--steps", "2",
                          "--formulation", "enumerated", "--out-dir", str(tmp_path))
    assert code == EXIT_OK
    assert kv["faults"] == "0"


def test_run_infeasible_initial_state_exit(tmp_path, capsys):
    cfg = tmp_path / "far.json"
    cfg.write_text(json.dumps({
        "preset": "deadbeat_toy",
        "run": {"x0": [50.0], "runs": 2, "steps": 3},
    }))
    code, kv, err = _invoke(capsys, "run", "--config", str(cfg),
                            "--out-dir", str(tmp_path))
    assert code == EXIT_INFEASIBLE
    assert "no feasible solution" in err


# ---------------------------------------------------------------------------
# terminal
# ---------------------------------------------------------------------------

def test_terminal_subcommand(tmp_path, capsys):
    code, kv, _ = _invoke(capsys, "terminal", "--preset", "quadruple_tank",
                          "--samples", "200", "--out-dir", str(tmp_path))
    assert code == EXIT_OK
    assert kv["plant"] == "quadruple_tank"
    # rounded published matrices miss the PSD gate by a few parts in 1e6
    assert -1e-4 < float(kv["lmi_min_eig"]) < 0.0
    assert 0.099 <= float(kv["beta"]) <= 0.149
    assert kv["invariance_ok"] == "True"
    payload = json.loads((tmp_path / "quadruple_tank_terminal.json").read_text())
    assert payload["invariance"]["ok"] is True
    assert payload["adapted"]["rcis"]["type"] == "ellipsoid"
    assert payload["adapted"]["rcis"]["level"] == payload["beta"]


def test_terminal_requires_ingredients(tmp_path, capsys):
    code, kv, err = _invoke(capsys, "terminal", "--preset", "deadbeat_toy",
                            "--out-dir", str(tmp_path))
    assert code == EXIT_CONFIG
    assert "no terminal ingredients" in err


# ---------------------------------------------------------------------------
# error handling and plumbing
# ---------------------------------------------------------------------------

def test_invalid_json_config_exit(tmp_path, capsys):
    cfg = tmp_path / "broken.json"
    cfg.write_text("{not json")
    code, kv, err = _invoke(capsys, "tighten", "--config", str(cfg),
                            "--out-dir", str(tmp_path))
    assert code == EXIT_CONFIG
    assert err.startswith("error:")


def test_missing_scenario_exit(tmp_path, capsys):
    code, _, err = _invoke(capsys, "tighten", "--out-dir", str(tmp_path))
    assert code == EXIT_CONFIG
    assert "either --preset or a config" in err


def test_missing_report_file_exit(tmp_path, capsys):
    code, _, err = _invoke(capsys, "report", "--out-dir", str(tmp_path),
                           "--report-name", "nope.json")
    assert code == EXIT_CONFIG
    assert "error:" in err


def test_unknown_preset_is_a_parse_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["tighten", "--preset", "pendulum", "--out-dir", str(tmp_path)])
    assert exc.value.code == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == "0.1.0"


def test_threads_flag_caps_pools(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    code, _, _ = _invoke(capsys, "tighten", "--preset", "deadbeat_toy",
                         "--threads", "1", "--out-dir", str(tmp_path))
    assert code == EXIT_OK
    assert os.environ["OMP_NUM_THREADS"] == "1"

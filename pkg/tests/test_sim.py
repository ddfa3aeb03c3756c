"""Closed-loop harness: lockstep batching, trace audits, persistence."""

import json

import numpy as np
import pytest

from contractmpc import (
    Box,
    ContractionCertificate,
    ControllerConfig,
    GridSpec,
    PlantModel,
    compute_tightening,
    init_theta,
    read_trace_csv,
    run_batch,
    run_closed_loop,
    save_report,
    stage_cost_bound,
    verify_trace,
    write_trace_csv,
)
from contractmpc.controller import theta_next
from contractmpc.sim import report_to_dict

from .conftest import make_config, nominal_clone


@pytest.fixture(scope="module")
def toy_trace(toy_cfg):
    return run_closed_loop(toy_cfg.model, toy_cfg, [1.5], 6, seed=42)


def _doomed_config():
    """Unstable scalar plant whose drift outruns the input authority: every
    candidate violates the state box one step after leaving the middle."""
    model = PlantModel(
        name="runaway",
        n=1, m=1, r=1,
        f=lambda x, u, w: 2.0 * x + 0.1 * u + w,
        state_box=Box([-2.0], [2.0]),
        input_box=Box([-1.0], [1.0]),
        dist_box=Box([-0.01], [0.01]),
        x_ref=[0.0], u_ref=[0.0],
        L_x=[[2.0]], L_u=[[0.1]], L_w=[[1.0]],
    )
    seq = compute_tightening(model, 2)
    cert = ContractionCertificate(
        P_gamma=np.eye(1), gamma=0.5, N_p=2,
        omega=2.0, gamma_max_val=4.0, omega_bound=0.5,
        rcis=model.state_box, grid_spec=GridSpec(5),
        gamma_table={2: 0.5},
    )
    l_bar = stage_cost_bound(np.eye(1), np.eye(1), model.state_box,
                             model.input_box, model.x_ref, model.u_ref)
    return ControllerConfig(model=model, Q=np.eye(1), R=np.eye(1), l_bar=l_bar,
                            xi="auto", nu=0.99, eps=1e-8, cert=cert, seq=seq)


# ---------------------------------------------------------------------------
# reproducibility and lockstep equivalence
# ---------------------------------------------------------------------------

def test_single_run_reproducible(toy_cfg, toy_trace):
    again = run_closed_loop(toy_cfg.model, toy_cfg, [1.5], 6, seed=42)
    for name in ("x", "u", "w", "theta", "V_star", "gamma"):
        assert getattr(again, name).tobytes() == getattr(toy_trace, name).tobytes()
    assert np.array_equal(again.q_star, toy_trace.q_star)


def test_batch_member_matches_single_run(toy_cfg, toy_trace):
    batch = run_batch(toy_cfg.model, toy_cfg, [1.5], 6, n_runs=3, base_seed=42)
    assert [tr.seed for tr in batch.traces] == [42, 43, 44]
    first = batch.traces[0]
    for name in ("x", "u", "w", "theta", "V_star", "gamma"):
        assert getattr(first, name).tobytes() == getattr(toy_trace, name).tobytes()


def test_disturbance_streams_are_per_run(toy_cfg, toy_trace):
    model = toy_cfg.model
    assert np.array_equal(
        toy_trace.w, model.dist_box.sample(np.random.default_rng(42), 6)
    )
    assert model.dist_box.contains(toy_trace.w).all()
    other = run_closed_loop(model, toy_cfg, [1.5], 6, seed=43)
    assert not np.array_equal(other.w, toy_trace.w)


def test_wall_clock_shared_across_batch(toy_cfg):
    batch = run_batch(toy_cfg.model, toy_cfg, [1.5], 4, n_runs=2, base_seed=7)
    a, b = batch.traces
    assert a.wall_clock.shape == (4,)
    assert (a.wall_clock >= 0).all()
    assert np.array_equal(a.wall_clock, b.wall_clock)


# ---------------------------------------------------------------------------
# trace content
# ---------------------------------------------------------------------------

def test_nominal_run_pinned_at_target(toy_preset, toy_seq):
    cfg = make_config(toy_preset, toy_seq, model=nominal_clone(toy_preset.model))
    tr = run_closed_loop(cfg.model, cfg, [0.0], 5, seed=0)
    assert np.all(tr.x == 0.0)
    assert np.all(tr.u == 0.0)
    assert np.all(tr.w == 0.0)
    assert np.all(tr.V_star == 0.0)
    assert np.all(tr.gamma == 0.0)
    assert not tr.fault


def test_verify_trace_replays_dynamics(toy_cfg, toy_trace):
    audit = verify_trace(toy_cfg.model, toy_trace)
    assert audit["dynamics_exact"]
    assert audit["violations"] == 0


def test_verify_trace_catches_tampering(toy_cfg, toy_trace):
    import copy

    bad = copy.deepcopy(toy_trace)
    bad.x[2, 0] += 10.0
    audit = verify_trace(toy_cfg.model, bad)
    assert not audit["dynamics_exact"]
    assert audit["dynamics_residual"] > 1.0
    assert audit["violations"] >= 1


def test_gamma_column_recomputes_from_states(toy_cfg, toy_trace):
    assert toy_trace.gamma == pytest.approx(
        np.asarray(toy_cfg.gamma_of(toy_trace.x)), abs=0
    )


def test_theta_column_follows_update_law(toy_cfg, toy_trace):
    theta = init_theta(toy_cfg, toy_trace.x[0]).theta
    for k in range(toy_trace.steps):
        if k > 0:
            theta = theta_next(toy_cfg, theta, toy_trace.x[k])
        assert toy_trace.theta[k] == theta


# ---------------------------------------------------------------------------
# batch statistics
# ---------------------------------------------------------------------------

def test_batch_report_aggregates(toy_cfg):
    rep = run_batch(toy_cfg.model, toy_cfg, [1.999], 6, n_runs=4, base_seed=10)
    assert rep.n_runs == 4 and rep.steps == 6 and rep.base_seed == 10
    assert rep.faults == 0 and rep.violations == 0
    assert rep.omega == pytest.approx(1.99**2)
    # Gamma(1.999) sits just above omega, one decision drops it below
    assert rep.steps_to_sublevel == [1, 1, 1, 1]
    assert rep.mean_steps_to_sublevel == 1.0
    assert all(g < 1e-3 for g in rep.final_gamma)
    assert all(d < 0.05 for d in rep.final_dist_inf)
    assert rep.final_dist_inf == [abs(tr.x[-1, 0]) for tr in rep.traces]


def test_batch_envelopes_ordered(toy_cfg):
    rep = run_batch(toy_cfg.model, toy_cfg, [1.5], 5, n_runs=3, base_seed=3)
    for key in ("x", "u", "gamma", "V_star"):
        env = rep.envelopes[key]
        lo = np.asarray(env["min"])
        mid = np.asarray(env["mean"])
        hi = np.asarray(env["max"])
        assert (lo <= mid + 1e-15).all() and (mid <= hi + 1e-15).all()
    assert len(rep.envelopes["gamma"]["mean"]) == 6
    assert len(rep.envelopes["u"]["mean"]) == 5


def test_empty_batch(toy_cfg, tmp_path):
    rep = run_batch(toy_cfg.model, toy_cfg, [1.5], 5, n_runs=0, base_seed=0)
    assert rep.n_runs == 0
    assert rep.traces == []
    assert rep.mean_steps_to_sublevel == 0.0
    assert rep.envelopes == {}
    save_report(tmp_path / "empty.json", rep)
    assert json.loads((tmp_path / "empty.json").read_text())["n_runs"] == 0


def test_zero_step_run(toy_cfg, tmp_path):
    tr = run_closed_loop(toy_cfg.model, toy_cfg, [1.5], 0, seed=5)
    assert tr.x.shape == (1, 1) and tr.u.shape == (0, 1)
    assert verify_trace(toy_cfg.model, tr)["dynamics_exact"]
    write_trace_csv(tmp_path / "zero.csv", tr)
    cols = read_trace_csv(tmp_path / "zero.csv")
    assert cols["x1"].shape == (1,)


def test_fault_truncates_run_and_report():
    cfg = _doomed_config()
    tr = run_closed_loop(cfg.model, cfg, [1.9], 4, seed=0)
    assert tr.fault and tr.fault_step == 0
    assert tr.steps == 0
    assert tr.x.shape == (1, 1)
    rep = run_batch(cfg.model, cfg, [1.9], 4, n_runs=2, base_seed=0)
    assert rep.faults == 2
    assert rep.envelopes == {}


def test_nonholonomic_short_batch(nh_cfg, nh_preset):
    rep = run_batch(nh_cfg.model, nh_cfg, nh_preset.x0, 2, n_runs=2, base_seed=100)
    assert rep.faults == 0 and rep.violations == 0
    for tr in rep.traces:
        assert nh_cfg.model.input_box.contains(tr.u).all()
        assert tr.theta[1] <= tr.theta[0] + 1e-12
        assert tr.gamma[-1] < tr.gamma[0]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_trace_csv_round_trip(toy_cfg, toy_trace, tmp_path):
    path = tmp_path / "trace.csv"
    write_trace_csv(path, toy_trace)
    cols = read_trace_csv(path)
    K = toy_trace.steps
    assert cols["k"].tolist() == list(range(K + 1))
    # repr-formatted floats survive the round trip exactly
    assert np.array_equal(cols["x1"], toy_trace.x[:, 0])
    assert np.array_equal(cols["Gamma"], toy_trace.gamma)
    assert np.array_equal(cols["u1"][:K], toy_trace.u[:, 0])
    assert np.array_equal(cols["theta"][:K], toy_trace.theta)
    assert np.array_equal(cols["V_star"][:K], toy_trace.V_star)
    assert np.array_equal(cols["q_star"][:K].astype(int), toy_trace.q_star)
    # the terminal row only carries state and Gamma
    for name in ("u1", "w1", "theta", "V_star", "q_star"):
        assert np.isnan(cols[name][K])


def test_trace_csv_header(toy_trace, tmp_path):
    path = tmp_path / "trace.csv"
    write_trace_csv(path, toy_trace)
    first = path.read_text().splitlines()[0]
    assert first == "k,x1,u1,w1,theta,V_star,q_star,Gamma"


def test_report_json_deterministic(toy_cfg, tmp_path):
    a = run_batch(toy_cfg.model, toy_cfg, [1.5], 4, n_runs=2, base_seed=9)
    b = run_batch(toy_cfg.model, toy_cfg, [1.5], 4, n_runs=2, base_seed=9)
    assert report_to_dict(a) == report_to_dict(b)
    save_report(tmp_path / "a.json", a)
    save_report(tmp_path / "b.json", b)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    loaded = json.loads((tmp_path / "a.json").read_text())
    assert loaded["violations"] == 0
    assert set(loaded) >= {"n_runs", "steps", "omega", "envelopes", "final_gamma"}

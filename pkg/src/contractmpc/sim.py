"""Closed-loop Monte-Carlo harness.

Runs advance in lockstep: one controller decision for the whole batch per
time step (the step engine is batched over runs), then every run applies
its own uniformly-sampled disturbance.  Disturbance sequences are drawn
up front from per-run generators seeded ``base_seed + run index``, so a
run's realization never depends on how many other runs share the batch.

Each run yields a SimTrace; a batch adds aggregate statistics and
per-step min/mean/max envelopes.  Identical configs and seeds reproduce
traces and reports byte for byte.
"""

import csv
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .controller import step_batch, theta_next

__all__ = [
    "SimTrace",
    "BatchReport",
    "run_closed_loop",
    "run_batch",
    "verify_trace",
    "write_trace_csv",
    "read_trace_csv",
    "report_to_dict",
    "save_report",
]


@dataclass
class SimTrace:
    """One closed-loop run; arrays are time-major.

    ``x`` and ``gamma`` carry one more row than the input-side arrays (the
    terminal state).  A faulted run is truncated at the step that failed.
    """

    run_id: int
    seed: int
    x: np.ndarray          # (K+1, n)
    u: np.ndarray          # (K, m)
    w: np.ndarray          # (K, r)
    theta: np.ndarray      # (K,)
    V_star: np.ndarray     # (K,)
    q_star: np.ndarray     # (K,) int
    gamma: np.ndarray      # (K+1,)
    fault: bool = False
    fault_step: Optional[int] = None
    wall_clock: np.ndarray = None  # (K,) seconds per decision (batch-shared)

    @property
    def steps(self):
        return self.u.shape[0]


@dataclass
class BatchReport:
    """Aggregate over a batch of runs sharing config and initial state."""

    n_runs: int
    steps: int
    base_seed: int
    omega: float
    violations: int
    faults: int
    steps_to_sublevel: list
    mean_steps_to_sublevel: float
    final_gamma: list
    final_dist_inf: list
    envelopes: dict
    traces: list = field(default_factory=list, repr=False)


def _containment_violations(model, trace, tol=1e-9):
    sb, ib = model.state_box, model.input_box
    sx = int((~sb.contains(trace.x, tol=tol)).sum()) if trace.x.size else 0
    su = int((~ib.contains(trace.u, tol=tol)).sum()) if trace.u.size else 0
    return sx + su


def verify_trace(model, trace, tol=1e-9):
    """Re-simulate the dynamics and audit the hard constraints."""
    resim = np.empty_like(trace.x)
    resim[0] = trace.x[0]
    for k in range(trace.steps):
        resim[k + 1] = model.step(trace.x[k], trace.u[k], trace.w[k])
    dyn = float(np.abs(resim - trace.x).max()) if trace.steps else 0.0
    return {
        "dynamics_residual": dyn,
        "dynamics_exact": dyn == 0.0,
        "violations": _containment_violations(model, trace, tol=tol),
    }


def _simulate(model, cfg, x0, steps, seeds):
    """Lockstep engine shared by single runs and batches."""
    R = len(seeds)
    n, m, r = model.n, model.m, model.r
    n_p = cfg.cert.N_p
    x0 = np.asarray(x0, float)
    if R and steps:
        w_all = np.stack([model.dist_box.sample(np.random.default_rng(s), steps) for s in seeds])
    else:
        w_all = np.zeros((R, steps, r))

    X = np.full((R, steps + 1, n), np.nan)
    U = np.full((R, steps, m), np.nan)
    TH = np.full((R, steps), np.nan)
    V = np.full((R, steps), np.nan)
    QS = np.zeros((R, steps), dtype=int)
    WC = np.zeros((R, steps))
    fault_step = np.full(R, -1, dtype=int)

    X[:, 0] = x0
    theta = np.maximum(cfg.eps, cfg.nu * np.atleast_1d(cfg.gamma_of(np.tile(x0, (R, 1)))))
    tails = np.tile(model.u_ref, (R, n_p, 1))
    alive = np.ones(R, dtype=bool)
    for k in range(steps):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        if k > 0:
            g = cfg.gamma_of(X[idx, k])
            theta[idx] = np.where(g > theta[idx], theta[idx],
                                  np.maximum(cfg.eps, cfg.nu * g))
        t0 = time.perf_counter()
        res = step_batch(cfg, X[idx, k], theta[idx], tails[idx])
        dt = time.perf_counter() - t0
        newly = idx[res.fault]
        fault_step[newly] = k
        alive[newly] = False
        ok = idx[~res.fault]
        sel = ~res.fault
        U[ok, k] = res.u0[sel]
        TH[ok, k] = theta[ok]
        V[ok, k] = res.V_star[sel]
        QS[ok, k] = res.q_star[sel]
        WC[ok, k] = dt
        X[ok, k + 1] = model.step(X[ok, k], res.u0[sel], w_all[ok, k])
        # shifted warm starts: drop the applied input, hold the reference
        nt = np.tile(model.u_ref, (ok.size, n_p, 1))
        keep = np.arange(n_p)[None, :] < (res.q_star[sel] - 1)[:, None]
        shifted = np.concatenate(
            [res.u_seq[sel, 1:], np.tile(model.u_ref, (sel.sum(), 1, 1))], axis=1
        )[:, :n_p]
        tails[ok] = np.where(keep[:, :, None], shifted, nt)

    traces = []
    for i, s in enumerate(seeds):
        K = fault_step[i] if fault_step[i] >= 0 else steps
        gam = np.asarray(cfg.gamma_of(X[i, : K + 1]), float).reshape(-1)
        traces.append(SimTrace(
            run_id=i, seed=int(s),
            x=X[i, : K + 1].copy(), u=U[i, :K].copy(), w=w_all[i, :K].copy(),
            theta=TH[i, :K].copy(), V_star=V[i, :K].copy(),
            q_star=QS[i, :K].copy(), gamma=gam,
            fault=fault_step[i] >= 0,
            fault_step=int(fault_step[i]) if fault_step[i] >= 0 else None,
            wall_clock=WC[i, :K].copy(),
        ))
    return traces


def run_closed_loop(model, cfg, x0, steps, seed):
    """Single closed-loop run with a uniformly sampled disturbance stream."""
    return _simulate(model, cfg, x0, steps, [int(seed)])[0]


def _envelope(stackable):
    arr = np.stack(stackable)
    return {
        "min": np.nanmin(arr, axis=0).tolist(),
        "mean": np.nanmean(arr, axis=0).tolist(),
        "max": np.nanmax(arr, axis=0).tolist(),
    }


def run_batch(model, cfg, x0, steps, n_runs, base_seed):
    """n_runs independent closed-loop runs plus aggregate statistics."""
    seeds = [int(base_seed) + i for i in range(n_runs)]
    traces = _simulate(model, cfg, x0, steps, seeds)
    omega = float(cfg.cert.omega)
    stl, fin_g, fin_d = [], [], []
    violations = faults = 0
    for tr in traces:
        violations += _containment_violations(model, tr)
        faults += int(tr.fault)
        below = np.flatnonzero(tr.gamma <= omega)
        stl.append(int(below[0]) if below.size else tr.steps)
        fin_g.append(float(tr.gamma[-1]))
        fin_d.append(float(np.abs(tr.x[-1] - model.x_ref).max()))
    env = {}
    if n_runs and all(not tr.fault for tr in traces):
        env = {
            "x": _envelope([tr.x for tr in traces]),
            "u": _envelope([tr.u for tr in traces]),
            "gamma": _envelope([tr.gamma for tr in traces]),
            "V_star": _envelope([tr.V_star for tr in traces]),
        }
    return BatchReport(
        n_runs=n_runs, steps=steps, base_seed=int(base_seed), omega=omega,
        violations=violations, faults=faults,
        steps_to_sublevel=stl,
        mean_steps_to_sublevel=float(np.mean(stl)) if stl else 0.0,
        final_gamma=fin_g, final_dist_inf=fin_d,
        envelopes=env, traces=traces,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def write_trace_csv(path, trace):
    """Time-major CSV; the terminal row carries only the state columns."""
    K, n = trace.steps, trace.x.shape[1]
    m, r = trace.u.shape[1], trace.w.shape[1]
    header = (["k"] + [f"x{i+1}" for i in range(n)] + [f"u{i+1}" for i in range(m)]
              + [f"w{i+1}" for i in range(r)] + ["theta", "V_star", "q_star", "Gamma"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k in range(K):
            wr.writerow([k] + [_fmt(v) for v in trace.x[k]]
                        + [_fmt(v) for v in trace.u[k]]
                        + [_fmt(v) for v in trace.w[k]]
                        + [_fmt(trace.theta[k]), _fmt(trace.V_star[k]),
                           int(trace.q_star[k]), _fmt(trace.gamma[k])])
        wr.writerow([K] + [_fmt(v) for v in trace.x[K]]
                    + [""] * (m + r) + ["", "", "", _fmt(trace.gamma[K])])


def read_trace_csv(path):
    """Columns back as a dict of float arrays (blank cells become NaN)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {h: [] for h in header}
    for row in body:
        for h, cell in zip(header, row):
            cols[h].append(float(cell) if cell != "" else np.nan)
    return {h: np.asarray(v) for h, v in cols.items()}


def report_to_dict(report):
    return {
        "n_runs": report.n_runs,
        "steps": report.steps,
        "base_seed": report.base_seed,
        "omega": report.omega,
        "violations": report.violations,
        "faults": report.faults,
        "steps_to_sublevel": report.steps_to_sublevel,
        "mean_steps_to_sublevel": report.mean_steps_to_sublevel,
        "final_gamma": report.final_gamma,
        "final_dist_inf": report.final_dist_inf,
        "envelopes": report.envelopes,
    }


def save_report(path, report):
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")

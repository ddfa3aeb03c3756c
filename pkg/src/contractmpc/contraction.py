"""Contraction certification: how fast, and over how many steps, can the
nominal system provably shrink the quadratic distance to the target.

The certificate bundles the contraction metric Gamma(x) =
(x-x_ref)' P_Gamma (x-x_ref), the grid-estimated contraction factor gamma,
the minimal qualifying horizon N_p, and the sizing constants omega (largest
Gamma-sublevel set inside the invariant region shrunk by one disturbance
step) and Gamma_max (largest Gamma over the state box).  gamma must stay
strictly below omega/Gamma_max for the controller's recursive-feasibility
argument to close.

Estimation is a sampled procedure, not a proof: per (grid point, horizon),
an input sequence minimizing the endpoint Gamma is solved for, states left
unconstrained, and the worst ratio over the grid is reported.  Grid layout
and seed ride in the certificate for reproducibility.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .boxes import Box, Ellipsoid, max_quadratic_on_box, max_sublevel_in_box, ellipsoid_pontryagin_shrink, pontryagin_diff
from .ocp import ProblemStack, SolverBudget, solve_stack
from .terminal import one_step_feasible, robust_invariance_report, unit_directions
from .tightening import max_feasible_horizon, tightened_state_box
from .validation import check_spd

__all__ = [
    "GridSpec",
    "ContractionCertificate",
    "default_grid",
    "estimate_gamma",
    "select_min_horizon",
    "build_certificate",
    "check_sublevel_containment",
    "audit_monotone",
    "certificate_to_dict",
    "certificate_from_dict",
    "save_certificate",
    "load_certificate",
]

log = logging.getLogger(__name__)

_GAMMA_FLOOR = 1e-9


def _cert_budget():
    # endpoint-only certification solves converge much faster than the
    # closed-loop problems; a lighter budget gives the same 4-decimal gammas
    return SolverBudget(max_iter=150, n_starts=3, tol=1e-7)


@dataclass(frozen=True)
class GridSpec:
    """Uniform per-axis lattice over the state box.

    ``points_per_axis`` is an int (shared by all axes) or one count per
    axis; endpoints are included.  ``seed`` feeds the solver's randomized
    starts so a certification run is reproducible from the spec alone.
    """

    points_per_axis: Union[int, tuple]
    seed: int = 0

    def counts(self, n):
        if isinstance(self.points_per_axis, int):
            return (self.points_per_axis,) * n
        if len(self.points_per_axis) != n:
            raise ValueError("points_per_axis length must match the state dimension")
        return tuple(int(c) for c in self.points_per_axis)

    def build(self, box):
        axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(box.lo, box.hi, self.counts(box.dim))]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def default_grid(model, seed=0):
    """20 points per axis up to three states, 9 per axis above."""
    return GridSpec(points_per_axis=20 if model.n <= 3 else 9, seed=seed)


@dataclass
class ContractionCertificate:
    """Everything the controller needs from the certification run.

    ``computed`` records exact values for any field that was pinned to a
    published constant (see build_certificate); absent otherwise.
    """

    P_gamma: np.ndarray
    gamma: float
    N_p: int
    omega: float
    gamma_max_val: float
    omega_bound: float
    rcis: Union[Box, Ellipsoid]
    grid_spec: GridSpec
    gamma_table: dict = field(default_factory=dict)
    computed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P_gamma = check_spd(self.P_gamma, "P_gamma")
        # 0 is admissible: an exact deadbeat plant contracts to the target in
        # one step and reports a zero ratio.
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must lie in [0,1), got {self.gamma}")
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        if self.gamma > self.omega_bound:
            raise ValueError(
                f"gamma {self.gamma:.6g} exceeds the bound omega/Gamma_max = {self.omega_bound:.6g}"
            )

    def gamma_fn(self, x, x_ref):
        d = np.asarray(x, dtype=float) - x_ref
        return np.einsum("...i,ij,...j->...", d, self.P_gamma, d)


# ---------------------------------------------------------------------------
# gamma estimation
# ---------------------------------------------------------------------------

def _gamma_details(model, P_gamma, N_hat, grid, budget, warm=None):
    """Worst endpoint-contraction ratio over the grid, plus per-point data.

    Returns (gamma, ratios, u_best, pts, mask) where u_best holds the best
    input sequence per retained grid point (used to warm start the next
    horizon) and mask flags the grid points with Gamma above the floor.
    """
    pts_all = grid.build(model.state_box)
    dx = pts_all - model.x_ref
    g0_all = np.einsum("ni,ij,nj->n", dx, P_gamma, dx)
    mask = g0_all >= _GAMMA_FLOOR
    pts = pts_all[mask]
    g0 = g0_all[mask]
    n_pts = pts.shape[0]
    if n_pts == 0:
        raise ValueError("grid has no points with Gamma above the floor")
    rng = np.random.default_rng(grid.seed)
    m = model.m
    starts = []
    if warm is not None:
        starts.append(np.asarray(warm, dtype=float))
    starts.append(np.zeros((n_pts, N_hat, m)))
    starts.append(np.tile(model.u_ref, (n_pts, N_hat, 1)))
    while len(starts) < max(budget.n_starts, 1):
        starts.append(model.input_box.sample(rng, n_pts * N_hat).reshape(n_pts, N_hat, m))
    starts = starts[: max(budget.n_starts, 1)]
    S = len(starts)
    B = S * n_pts
    stack = ProblemStack(
        model=model,
        x0=np.tile(pts, (S, 1)),
        q=np.full(B, N_hat, dtype=int),
        endpoint=np.full(B, N_hat, dtype=int),
        theta=np.zeros(B),
        xi=np.ones(B),
        Q=np.zeros((model.n, model.n)),
        R=np.zeros((m, m)),
        P_gamma=P_gamma,
        cons_lo=np.full((N_hat + 1, model.n), -np.inf),
        cons_hi=np.full((N_hat + 1, model.n), np.inf),
        u_lo=model.input_box.lo,
        u_hi=model.input_box.hi,
        x_ref=model.x_ref,
        u_ref=model.u_ref,
    )
    res = solve_stack(stack, np.concatenate(starts, axis=0), budget)
    vals = res.value.reshape(S, n_pts)
    best_s = vals.argmin(axis=0)
    best = vals[best_s, np.arange(n_pts)]
    u_best = res.u.reshape(S, n_pts, N_hat, m)[best_s, np.arange(n_pts)]
    ratios = best / g0
    bad = ~np.isfinite(ratios) | (ratios > 1.0 + 1e-9)
    if bad.any():
        log.warning(
            "horizon %d: %d/%d grid points failed to contract (worst ratio %.4f); "
            "counted as ratio 1",
            N_hat, int(bad.sum()), n_pts, float(np.nanmax(np.where(bad, ratios, -np.inf))),
        )
        ratios = np.where(bad, 1.0, ratios)
    return float(ratios.max()), ratios, u_best, pts, mask


def estimate_gamma(model, P_gamma, N_hat, grid, budget=None):
    """gamma(N_hat): the worst grid-point ratio Gamma(x_hat(N_hat))/Gamma(x)
    attainable with admissible inputs and unconstrained predicted states."""
    budget = budget or _cert_budget()
    P_gamma = check_spd(P_gamma, "P_gamma")
    gamma, _, _, _, _ = _gamma_details(model, P_gamma, int(N_hat), grid, budget)
    return gamma


def _scan_horizons(model, P_gamma, N_max, omega_bound, grid, budget):
    table = {}
    warm = None
    for N_hat in range(1, N_max + 1):
        gamma, _, u_best, _, _ = _gamma_details(model, P_gamma, N_hat, grid, budget, warm=warm)
        table[N_hat] = gamma
        log.info("gamma(%d) = %.6f (bound %.6f)", N_hat, gamma, omega_bound)
        if gamma < omega_bound:
            return N_hat, gamma, table
        # extend each point's best sequence by one held input for the next pass
        warm = np.concatenate([u_best, np.tile(model.u_ref, (u_best.shape[0], 1, 1))], axis=1)
    return None, None, table


def select_min_horizon(model, P_gamma, N_max, omega_bound, grid, budget=None):
    """Smallest horizon in [1, N_max] whose gamma estimate beats the bound.

    Scans ascending, reusing each grid point's best input sequence
    (extended by one held input) to warm start the next horizon.
    """
    budget = budget or _cert_budget()
    if not 0 < omega_bound < 1:
        raise ValueError(f"omega_bound must lie in (0,1), got {omega_bound}")
    P_gamma = check_spd(P_gamma, "P_gamma")
    N_p, gamma, table = _scan_horizons(model, P_gamma, N_max, omega_bound, grid, budget)
    if N_p is None:
        raise ValueError(
            "certificate unavailable: no qualifying horizon in "
            f"[1, {N_max}] reaches contraction bound {omega_bound:.4g}; "
            "consider certifying over a smaller state set"
        )
    return N_p, gamma


# ---------------------------------------------------------------------------
# certificate assembly
# ---------------------------------------------------------------------------

def check_sublevel_containment(P_gamma, x_ref, omega, rcis, r1_box, samples=10_000, seed=0):
    """Worst margin of {Gamma <= omega} (+) R(1) inside the invariant region.

    Boundary points of the sublevel set are taken along deterministic
    low-discrepancy directions; each is offset by every vertex of R(1) and
    tested for membership (exact for a convex region, since the extreme
    offsets are at box vertices).  Positive margin = containment holds.
    """
    dirs = unit_directions(len(x_ref), samples, seed=seed)
    L = np.linalg.cholesky(P_gamma)
    y = np.linalg.solve(L.T, dirs.T).T
    nrm = np.sqrt(np.einsum("ni,ij,nj->n", y, P_gamma, y))
    bnd = x_ref + np.sqrt(omega) * y / nrm[:, None]
    verts = r1_box.vertices() if r1_box.dim else np.zeros((1, len(x_ref)))
    shifted = (bnd[:, None, :] + verts[None, :, :]).reshape(-1, len(x_ref))
    if isinstance(rcis, Box):
        margin = np.minimum(shifted - rcis.lo, rcis.hi - shifted).min()
    else:
        margin = (rcis.level - rcis.value(shifted)).min()
    return float(margin)


def audit_monotone(gamma_table, tol=2e-2):
    """Worst increase of gamma between consecutive horizons.

    Longer horizons can only improve the attainable endpoint value, so any
    increase is solver noise; above ``tol`` it points at a broken solve.
    """
    keys = sorted(gamma_table)
    worst = 0.0
    for a, b in zip(keys, keys[1:]):
        worst = max(worst, gamma_table[b] - gamma_table[a])
    return worst


def build_certificate(model, P_gamma, rcis, seq, grid=None, budget=None, pins=None,
                      check_samples=200, containment_samples=10_000):
    """Compose Gamma_max, omega, and the minimal-horizon scan into a
    certificate, verifying the invariant-region assumptions on the way.

    ``pins`` optionally forces {"omega": ..., "gamma_max": ...} to
    published constants; the exact computed values are then recorded under
    ``certificate.computed``.  A pinned omega must not exceed the computed
    one (any smaller omega remains valid); a pinned gamma_max widens the
    contraction bound and is logged, since selections made with it lean on
    the published value.
    """
    budget = budget or _cert_budget()
    grid = grid or default_grid(model, seed=budget.seed)
    P_gamma = check_spd(P_gamma, "P_gamma")
    pins = pins or {}
    r1 = seq.R(1)

    # condition 3: the region shrunk by one disturbance step must be usable
    if isinstance(rcis, Box):
        shrunk = pontryagin_diff(rcis, r1)
        if shrunk.is_empty or not shrunk.contains(model.x_ref):
            raise ValueError(
                "invariant region shrunk by R(1) is empty or excludes the target "
                "(condition 3 of the invariant-region assumption)"
            )
        centered = Box(shrunk.lo - model.x_ref, shrunk.hi - model.x_ref)
        omega_computed = max_sublevel_in_box(P_gamma, centered)
    elif isinstance(rcis, Ellipsoid):
        if np.abs(rcis.center - model.x_ref).max() > 1e-9:
            raise ValueError("ellipsoidal invariant region must be centered at the target")
        omega_computed = ellipsoid_pontryagin_shrink(rcis, r1)
        if omega_computed <= 0:
            raise ValueError(
                "invariant region shrunk by R(1) is empty "
                "(condition 3 of the invariant-region assumption)"
            )
    else:
        raise ValueError("rcis must be a Box or an Ellipsoid")

    omega = float(pins.get("omega", omega_computed))
    if omega > omega_computed + 1e-12:
        raise ValueError(
            f"pinned omega {omega} exceeds the computed value {omega_computed:.6g}; "
            "only smaller values stay valid"
        )

    gm = max_quadratic_on_box(P_gamma, model.x_ref, model.state_box)
    if not gm.exact:
        log.warning("Gamma_max came from the sampled fallback; treat as a lower bound")
    gamma_max = float(pins.get("gamma_max", gm.value))
    if "gamma_max" in pins:
        log.info(
            "using pinned Gamma_max %.6g (computed %.6g); the contraction bound "
            "follows the pinned value", gamma_max, gm.value,
        )

    # condition 1: robust invariance of the region (sampled)
    rep = robust_invariance_report(model, rcis, samples=check_samples, seed=grid.seed)
    if not rep.ok:
        raise ValueError(
            f"invariant-region check failed (worst residual {rep.max_residual:.3e}, "
            f"vertex audit margin {rep.vertex_audit_margin:.3e})"
        )
    # condition 2: one-step controllability into the once-tightened state box
    target = tightened_state_box(model, seq, 1)
    if target.is_empty:
        raise ValueError("state box shrunk by R(1) is empty; disturbance too large")
    rng = np.random.default_rng(grid.seed)
    if isinstance(rcis, Box):
        cond2_pts = rcis.sample(rng, check_samples)
    else:
        d = rng.normal(size=(check_samples, model.n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        radii = np.sqrt(rng.uniform(0.0, 1.0, size=check_samples))
        Lc = np.linalg.cholesky(rcis.shape)
        y = np.linalg.solve(Lc.T, d.T).T
        y *= (np.sqrt(rcis.level) / np.sqrt(np.einsum("ni,ij,nj->n", y, rcis.shape, y)))[:, None]
        cond2_pts = rcis.center + y * radii[:, None]
    _, res2 = one_step_feasible(model, cond2_pts, np.zeros((1, model.r)), target)
    if res2.max() > 1e-6:
        raise ValueError(
            "one-step controllability into the tightened state box failed "
            f"(worst residual {float(res2.max()):.3e})"
        )

    # sampled certificate that the omega-sublevel set fits the shrunk region
    margin = check_sublevel_containment(
        P_gamma, model.x_ref, omega, rcis, r1, samples=containment_samples, seed=grid.seed
    )
    if margin < -1e-9:
        raise ValueError(
            f"sublevel set for omega={omega:.6g} leaves the shrunk invariant region "
            f"(worst margin {margin:.3e})"
        )

    omega_bound = omega / gamma_max
    N_cap = max_feasible_horizon(model, seq)
    N_p, gamma, table = _scan_horizons(model, P_gamma, N_cap, omega_bound, grid, budget)
    if N_p is None:
        raise ValueError(
            "certificate unavailable: no qualifying horizon in "
            f"[1, {N_cap}] reaches contraction bound {omega_bound:.4g}; "
            "consider certifying over a smaller state set"
        )
    worst_rise = audit_monotone(table)
    if worst_rise > 2e-2:
        log.warning("gamma estimates rose by %.3g between horizons; solver noise above audit level", worst_rise)
    computed = {}
    if "omega" in pins:
        computed["omega"] = float(omega_computed)
    if "gamma_max" in pins:
        computed["gamma_max"] = float(gm.value)
    return ContractionCertificate(
        P_gamma=P_gamma,
        gamma=gamma,
        N_p=N_p,
        omega=omega,
        gamma_max_val=gamma_max,
        omega_bound=omega_bound,
        rcis=rcis,
        grid_spec=grid,
        gamma_table=table,
        computed=computed,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _rcis_to_dict(rcis):
    if isinstance(rcis, Box):
        return {"type": "box", "lo": rcis.lo.tolist(), "hi": rcis.hi.tolist()}
    return {
        "type": "ellipsoid",
        "center": rcis.center.tolist(),
        "shape": rcis.shape.tolist(),
        "level": rcis.level,
    }


def _rcis_from_dict(d):
    if d["type"] == "box":
        return Box(np.asarray(d["lo"], float), np.asarray(d["hi"], float))
    if d["type"] == "ellipsoid":
        return Ellipsoid(
            center=np.asarray(d["center"], float),
            shape=np.asarray(d["shape"], float),
            level=float(d["level"]),
        )
    raise ValueError(f"unknown region type {d['type']!r}")


def certificate_to_dict(cert):
    return {
        "P_gamma": cert.P_gamma.tolist(),
        "gamma": cert.gamma,
        "N_p": cert.N_p,
        "omega": cert.omega,
        "gamma_max_val": cert.gamma_max_val,
        "omega_bound": cert.omega_bound,
        "rcis": _rcis_to_dict(cert.rcis),
        "grid_spec": asdict(cert.grid_spec),
        "gamma_table": {str(k): v for k, v in cert.gamma_table.items()},
        "computed": cert.computed,
    }


def certificate_from_dict(d):
    gs = d["grid_spec"]
    ppa = gs["points_per_axis"]
    grid = GridSpec(points_per_axis=tuple(ppa) if isinstance(ppa, list) else int(ppa), seed=int(gs.get("seed", 0)))
    return ContractionCertificate(
        P_gamma=np.asarray(d["P_gamma"], float),
        gamma=float(d["gamma"]),
        N_p=int(d["N_p"]),
        omega=float(d["omega"]),
        gamma_max_val=float(d["gamma_max_val"]),
        omega_bound=float(d["omega_bound"]),
        rcis=_rcis_from_dict(d["rcis"]),
        grid_spec=grid,
        gamma_table={int(k): float(v) for k, v in d.get("gamma_table", {}).items()},
        computed=d.get("computed", {}),
    )


def save_certificate(path, cert):
    with open(path, "w") as fh:
        json.dump(certificate_to_dict(cert), fh, indent=2)


def load_certificate(path):
    with open(path) as fh:
        return certificate_from_dict(json.load(fh))

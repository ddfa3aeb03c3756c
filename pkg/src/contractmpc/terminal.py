"""Terminal-ingredient verification: LMI check, sublevel-set sizing, and
robust invariance of a candidate terminal region.

This module verifies rather than synthesizes.  Given (P, K, kappa) for the
linearization at the regulation target, it

* evaluates the block LMI certifying the terminal-cost decrease (both in
  Schur form and as the pre-Schur quadratic inequality, which must agree),
* bisects the largest sublevel level beta of V_f(x) = (x-x_ref)' P (x-x_ref)
  on which the linearization-error bound and input admissibility hold,
* checks robust invariance of a region by sampled one-step feasibility
  solves against every disturbance vertex simultaneously.

The verified ellipsoid {V_f <= beta} doubles as the invariant region and P
as the contraction metric in the four-tank configuration.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .boxes import Box, Ellipsoid
from .validation import as_float_matrix, check_in_range, check_spd

__all__ = [
    "TerminalIngredients",
    "RobustInvarianceReport",
    "linearize",
    "verify_lmi",
    "pre_schur_max_eig",
    "bisect_beta",
    "one_step_feasible",
    "verify_robust_invariance",
    "robust_invariance_report",
    "as_rcis",
    "unit_directions",
]

log = logging.getLogger(__name__)

_GATE = 1e-8


@dataclass(frozen=True)
class TerminalIngredients:
    """A candidate (P, K, kappa) with the linearization it was designed for.

    ``beta`` is the sublevel radius of the terminal region and may be None
    until bisected.  Whether the pair actually certifies the terminal-cost
    decrease is established by ``verify_lmi``; published matrices rounded
    to a few decimals can miss the PSD gate by more than it allows, so the
    constructor does not enforce it.
    """

    P: np.ndarray
    K: np.ndarray
    kappa: float
    A: np.ndarray
    B: np.ndarray
    beta: Optional[float] = None

    def __post_init__(self):
        P = check_spd(self.P, "P")
        n = P.shape[0]
        K = as_float_matrix(self.K, "K")
        if K.shape[1] != n:
            raise ValueError("K column count must match the state dimension")
        A = as_float_matrix(self.A, "A", shape=(n, n))
        B = as_float_matrix(self.B, "B", shape=(n, K.shape[0]))
        check_in_range(self.kappa, "kappa", lo=0.0, hi=1.0, lo_open=True, hi_open=True)
        if self.beta is not None and not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "kappa", float(self.kappa))


def linearize(model, x_ref=None, u_ref=None):
    """(A, B) of the nominal dynamics at the target, by central differences.

    Finite differences are used deliberately, even when the model carries
    analytic Jacobians, so published linearizations are reproduced by the
    same procedure everywhere.  Step per component: 1e-6 * (1 + |value|).
    """
    x_ref = model.x_ref if x_ref is None else np.asarray(x_ref, dtype=float)
    u_ref = model.u_ref if u_ref is None else np.asarray(u_ref, dtype=float)
    n, m = x_ref.size, u_ref.size
    A = np.empty((n, n))
    B = np.empty((n, m))
    for j in range(n):
        h = 1e-6 * (1.0 + abs(x_ref[j]))
        xp, xm = x_ref.copy(), x_ref.copy()
        xp[j] += h
        xm[j] -= h
        A[:, j] = (model.step_nominal(xp, u_ref) - model.step_nominal(xm, u_ref)) / (2 * h)
    for j in range(m):
        h = 1e-6 * (1.0 + abs(u_ref[j]))
        up, um = u_ref.copy(), u_ref.copy()
        up[j] += h
        um[j] -= h
        B[:, j] = (model.step_nominal(x_ref, up) - model.step_nominal(x_ref, um)) / (2 * h)
    return A, B


def pre_schur_max_eig(ing, Q, R):
    """Largest eigenvalue of A_K' P A_K - (1-kappa) P + Q + K' R K.

    The terminal-cost decrease requires this matrix to be negative
    semidefinite; it is the quadratic-form counterpart of the block LMI.
    """
    A_K = ing.A + ing.B @ ing.K
    G = A_K.T @ ing.P @ A_K - (1.0 - ing.kappa) * ing.P + Q + ing.K.T @ R @ ing.K
    return float(np.linalg.eigvalsh(0.5 * (G + G.T)).max())


def verify_lmi(ing, Q, R):
    """Minimum eigenvalue of the Schur-form block matrix; callers gate on
    >= -1e-8.

    With S = P^-1 and O = K S the matrix is

        [ (1-k)S   (AS+BO)'   S     O'   ]
        [ AS+BO       S       0     0    ]
        [   S         0     Q^-1    0    ]
        [   O         0       0   R^-1   ]

    The sign of the verdict must agree with the pre-Schur inequality; a
    disagreement beyond numerical noise raises, since it would mean the
    two routes are not evaluating the same condition.
    """
    Q = as_float_matrix(Q, "Q", shape=ing.P.shape)
    R = as_float_matrix(R, "R", shape=(ing.K.shape[0], ing.K.shape[0]))
    if abs(np.linalg.det(Q)) < 1e-300 or abs(np.linalg.det(R)) < 1e-300:
        raise ValueError("Q and R must be nonsingular")
    n, m = ing.P.shape[0], ing.K.shape[0]
    S = np.linalg.inv(ing.P)
    O = ing.K @ S
    ASBO = ing.A @ S + ing.B @ O
    M = np.zeros((3 * n + m, 3 * n + m))
    M[:n, :n] = (1.0 - ing.kappa) * S
    M[:n, n:2 * n] = ASBO.T
    M[n:2 * n, :n] = ASBO
    M[n:2 * n, n:2 * n] = S
    M[:n, 2 * n:3 * n] = S
    M[2 * n:3 * n, :n] = S
    M[2 * n:3 * n, 2 * n:3 * n] = np.linalg.inv(Q)
    M[:n, 3 * n:] = O.T
    M[3 * n:, :n] = O
    M[3 * n:, 3 * n:] = np.linalg.inv(R)
    min_eig = float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())
    pre = pre_schur_max_eig(ing, Q, R)
    schur_ok = min_eig >= -_GATE
    pre_ok = pre <= _GATE
    if schur_ok != pre_ok and max(abs(min_eig), abs(pre)) > 1e-6:
        raise ValueError(
            f"Schur and pre-Schur checks disagree (min eig {min_eig:.3e}, pre-Schur max {pre:.3e})"
        )
    return min_eig


def unit_directions(n_dim, count, seed=0):
    """Deterministic low-discrepancy directions on the unit sphere.

    A Sobol sequence mapped through the normal inverse CDF and normalized;
    the degenerate all-median row is dropped.
    """
    eng = qmc.Sobol(d=n_dim, scramble=False, seed=seed)
    pts = eng.random(2 ** int(np.ceil(np.log2(count + 8))))
    z = ndtri(np.clip(pts, 1e-12, 1.0 - 1e-12))
    nrm = np.linalg.norm(z, axis=1)
    z = z[nrm > 1e-9]
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    return z[:count]


def _ellipsoid_boundary(P, x_ref, level, dirs):
    L = np.linalg.cholesky(P)
    y = np.linalg.solve(L.T, dirs.T).T
    nrm = np.sqrt(np.einsum("ni,ij,nj->n", y, P, y))
    return x_ref + np.sqrt(level) * y / nrm[:, None]


def _linearization_error_margin(model, ing, pts):
    """Per-point margin of the error bound
    e'Pe + 2 dx' A_K' P e <= kappa dx' P dx (positive = satisfied)."""
    dx = pts - model.x_ref
    u = model.u_ref + dx @ ing.K.T
    A_K = ing.A + ing.B @ ing.K
    e = model.step_nominal(pts, u) - (model.x_ref + dx @ A_K.T)
    lhs = np.einsum("ni,ij,nj->n", e, ing.P, e) + 2.0 * np.einsum(
        "ni,ij,nj->n", dx @ A_K.T, ing.P, e
    )
    rhs = ing.kappa * np.einsum("ni,ij,nj->n", dx, ing.P, dx)
    return rhs - lhs


def _input_admissible_margin(model, ing, pts):
    dx = pts - model.x_ref
    u = model.u_ref + dx @ ing.K.T
    lo = (u - model.input_box.lo).min(axis=1)
    hi = (model.input_box.hi - u).min(axis=1)
    return np.minimum(lo, hi)


def bisect_beta(model, ing, Q, R, samples=10_000, seed=0, rel_tol=1e-3, max_iter=40):
    """Largest sublevel level beta of V_f passing both terminal conditions.

    At each candidate beta the linearization-error bound and the local
    control law's input admissibility are checked on ``samples`` boundary
    points of {V_f = beta} generated from deterministic low-discrepancy
    directions.  The search starts from the largest sublevel set contained
    in the state box (so {V_f <= beta} within X holds throughout) and
    bisects down to relative tolerance ``rel_tol``.
    """
    dirs = unit_directions(ing.P.shape[0], samples, seed=seed)
    # largest level still inside X, per-axis nearer-face formula
    box = model.state_box
    b = np.minimum(model.x_ref - box.lo, box.hi - model.x_ref)
    if (b <= 0).any():
        raise ValueError("x_ref must lie strictly inside the state box")
    hi = float((b ** 2 / np.diag(np.linalg.inv(ing.P))).min())

    def passes(beta):
        pts = _ellipsoid_boundary(ing.P, model.x_ref, beta, dirs)
        if _linearization_error_margin(model, ing, pts).min() < -1e-12:
            return False
        return bool(_input_admissible_margin(model, ing, pts).min() >= -1e-12)

    if passes(hi):
        return hi
    lo_b, hi_b = 0.0, hi
    best = 0.0
    for _ in range(max_iter):
        mid = 0.5 * (lo_b + hi_b)
        if passes(mid):
            best = mid
            lo_b = mid
        else:
            hi_b = mid
        if hi_b - lo_b <= rel_tol * max(hi_b, 1e-30):
            break
    if best == 0.0:
        raise ValueError("no valid terminal region: conditions fail for every beta > 0")
    return best


# ---------------------------------------------------------------------------
# robust invariance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RobustInvarianceReport:
    """Outcome of the sampled robust-invariance check.

    ``max_residual`` is the worst remaining region-violation after the
    per-sample feasibility solves (one input against all disturbance
    vertices).  ``vertex_audit_margin`` is how much interior disturbance
    draws stayed below the vertex worst case; a negative value would mean
    the vertices were not the binding disturbances.
    """

    ok: bool
    max_residual: float
    vertex_audit_margin: float
    n_samples: int


def _region_violation(region, pts):
    """Nonnegative scalar violation per point; 0 means inside."""
    if isinstance(region, Box):
        v = np.maximum(region.lo - pts, 0.0) + np.maximum(pts - region.hi, 0.0)
        return v.sum(axis=-1)
    return np.maximum(region.value(pts) - region.level, 0.0)


def _region_samples(region, count, rng):
    """Boundary-biased samples: half on the boundary, half pulled inward."""
    half = count // 2
    if isinstance(region, Box):
        inner = region.sample(rng, count - half)
        pts = region.sample(rng, half)
        # push one random axis of each point to a random face
        ax = rng.integers(0, region.dim, size=half)
        side = rng.integers(0, 2, size=half)
        face = np.where(side == 1, region.hi[ax], region.lo[ax])
        pts[np.arange(half), ax] = face
        return np.vstack([pts, inner])
    dirs = rng.normal(size=(count, region.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    bnd = _ellipsoid_boundary(region.shape, region.center, region.level, dirs)
    scale = np.ones(count)
    scale[half:] = rng.uniform(0.0, 1.0, size=count - half)
    return region.center + (bnd - region.center) * scale[:, None]


def one_step_feasible(model, pts, w_points, region, u0=None, n_iter=200):
    """Per-point inputs steering every listed disturbance's successor into
    the region, found by a projected-gradient feasibility solve.

    One shared input per point is optimized against all rows of
    ``w_points`` simultaneously (the existential quantifier precedes the
    disturbance in the invariance condition).  The input dimension is
    small, so gradients are finite differences over the true violation.

    Returns (u, residual) with residual the per-point worst violation over
    ``w_points`` at the returned input; 0 means success.
    """
    pts = np.asarray(pts, dtype=float)
    W_pts = np.atleast_2d(np.asarray(w_points, dtype=float))
    N, V = pts.shape[0], W_pts.shape[0]
    m = model.input_box.dim
    if u0 is None:
        u = np.tile(model.u_ref, (N, 1))
    else:
        u = np.array(u0, dtype=float, copy=True)
    u = np.clip(u, model.input_box.lo, model.input_box.hi)
    xs = np.broadcast_to(pts[:, None, :], (N, V, pts.shape[1]))
    ws = np.broadcast_to(W_pts, (N, V, W_pts.shape[1]))

    def total_violation(u_all):
        us = np.broadcast_to(u_all[:, None, :], (N, V, m))
        nxt = model.step(xs, us, ws)
        return _region_violation(region, nxt.reshape(N * V, -1)).reshape(N, V).sum(axis=1)

    alpha = np.full(N, 0.5)
    f_cur = total_violation(u)
    for _ in range(n_iter):
        live = f_cur > 1e-14
        if not live.any():
            break
        g = np.zeros_like(u)
        for j in range(m):
            h = 1e-6 * (1.0 + np.abs(u[:, j]))
            up, um = u.copy(), u.copy()
            up[:, j] += h
            um[:, j] -= h
            g[:, j] = (total_violation(up) - total_violation(um)) / (2 * h)
        trial = np.clip(u - alpha[:, None] * g, model.input_box.lo, model.input_box.hi)
        f_trial = total_violation(trial)
        ok = live & (f_trial < f_cur)
        u = np.where(ok[:, None], trial, u)
        f_cur = np.where(ok, f_trial, f_cur)
        alpha = np.where(ok, np.minimum(alpha * 1.5, 1e3), alpha * 0.5)
        alpha = np.maximum(alpha, 1e-12)
    us = np.broadcast_to(u[:, None, :], (N, V, m))
    res = _region_violation(region, model.step(xs, us, ws).reshape(N * V, -1)).reshape(N, V).max(axis=1)
    return u, res


def robust_invariance_report(model, region, samples=1000, seed=0, n_iter=200, audit_draws=64):
    """Sampled check of: for every x in the region there is one admissible
    input keeping every disturbance-vertex successor inside the region.

    The disturbance-vertex reduction is audited per sample with uniform
    interior draws.
    """
    rng = np.random.default_rng(seed)
    pts = _region_samples(region, samples, rng)
    in_x = model.state_box.contains(pts, tol=1e-9)
    if not np.asarray(in_x).all():
        raise ValueError("region is not contained in the state box")
    W_v = model.dist_box.vertices()  # (V, r)
    N, V = pts.shape[0], W_v.shape[0]
    m = model.input_box.dim
    u, vertex_res = one_step_feasible(model, pts, W_v, region, n_iter=n_iter)
    max_residual = float(vertex_res.max())
    # audit: interior disturbance draws must not exceed the vertex worst case
    w_int = model.dist_box.sample(rng, audit_draws)
    xs = np.broadcast_to(pts[:, None, :], (N, audit_draws, pts.shape[1]))
    us = np.broadcast_to(u[:, None, :], (N, audit_draws, m))
    ws = np.broadcast_to(w_int, (N, audit_draws, w_int.shape[1]))
    int_res = _region_violation(region, model.step(xs, us, ws).reshape(N * audit_draws, -1)).reshape(N, audit_draws).max(axis=1)
    audit_margin = float((vertex_res - int_res).min())
    ok = max_residual <= 1e-6
    if audit_margin < -1e-9:
        log.warning(
            "disturbance vertices were not the binding draws (margin %.3e); "
            "the vertex reduction is unsound for this plant",
            audit_margin,
        )
        ok = False
    return RobustInvarianceReport(
        ok=ok, max_residual=max_residual, vertex_audit_margin=audit_margin, n_samples=N
    )


def verify_robust_invariance(model, region, samples=1000, seed=0):
    """Boolean front end of ``robust_invariance_report``."""
    return robust_invariance_report(model, region, samples=samples, seed=seed).ok


def as_rcis(ing, x_ref):
    """Adapt verified ingredients into certificate inputs:
    the region {V_f <= beta} and the contraction metric P."""
    if ing.beta is None:
        raise ValueError("beta has not been set; run bisect_beta first")
    return Ellipsoid(center=np.asarray(x_ref, dtype=float), shape=ing.P, level=ing.beta), ing.P

"""Finite-horizon open-loop optimal control by direct single shooting.

Decision variables are the inputs only; states follow from the rollout, so
dynamics hold exactly by construction.  Input boxes are handled by
projection, tightened state boxes by an exact l1 penalty with increasing
weight.  The core iterates a spectral projected-gradient method that is
vectorized over a stack of independent problems — multi-start branches,
endpoint-enumeration branches, and certification grid points all ride in
one stack, which is what makes grid certification affordable on a single
core.

The min-over-j part of the objectives (the contraction term) is nonsmooth;
by default it is split into one smooth endpoint problem per candidate j and
the results reduced, which preserves the exact semantics.  A soft-min
surrogate with a ramped sharpness is available as a fast path; either way
the reported minimizer index and value are re-evaluated on the hard min of
the returned trajectory.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .boxes import Box
from .validation import as_float_matrix, as_float_vector, check_spd

__all__ = [
    "SolverBudget",
    "MinGammaAt",
    "MinGammaOverHorizon",
    "FullCost",
    "OcpProblem",
    "OcpSolution",
    "OPTIMAL_LOCAL",
    "MAX_ITER",
    "INFEASIBLE",
    "solve",
    "gradient",
    "rollout_nominal",
    "solve_stack",
    "ProblemStack",
    "StackResult",
]

OPTIMAL_LOCAL = "Optimal-local"
MAX_ITER = "MaxIter"
INFEASIBLE = "Infeasible"

_TIE_TOL = 1e-12


@dataclass(frozen=True)
class SolverBudget:
    """Iteration, tolerance, penalty, and multi-start settings.

    ``max_iter`` is per start and per penalty round; the penalty weight
    starts at ``penalty_init`` and doubles until the worst state-box
    violation drops to ``feas_tol`` or ``max_penalty_rounds`` is exhausted
    (then the branch counts as infeasible).  ``n_starts`` counts the warm
    start when one is present; the extra starts are zero input, a
    u_ref-constant sequence, and seeded uniform draws from the input box.
    """

    max_iter: int = 400
    tol: float = 1e-8
    penalty_init: float = 1e3
    penalty_growth: float = 2.0
    max_penalty_rounds: int = 8
    feas_tol: float = 1e-6
    n_starts: int = 5
    seed: int = 0
    soft_min: bool = False
    soft_min_betas: tuple = (10.0, 1e2, 1e3, 1e4)
    # a branch whose accepted steps improve by less than
    # ftol*(1+|f|) for stall_limit consecutive iterations stops early
    ftol: float = 1e-10
    stall_limit: int = 40


@dataclass(frozen=True)
class MinGammaAt:
    """Minimize Gamma at one prediction step j (1-based), states optionally free."""

    j: int
    P_gamma: np.ndarray


@dataclass(frozen=True)
class MinGammaOverHorizon:
    """Minimize min_{j=1..q} Gamma(x(j))."""

    P_gamma: np.ndarray


@dataclass(frozen=True)
class FullCost:
    """theta * sum_{t<q} l(x(t),u(t)) + xi * min_{j=1..q} Gamma(x(j))."""

    theta: float
    xi: float
    Q: np.ndarray
    R: np.ndarray
    P_gamma: np.ndarray


@dataclass(frozen=True)
class OcpProblem:
    """One fixed-horizon problem over a single initial state.

    ``state_boxes`` is a per-step list of length q+1 (entry j constrains
    x(j)); None means no state constraints at all, and a None entry means
    that step is unconstrained.  ``input_box`` defaults to the model's.
    """

    model: object
    x0: np.ndarray
    horizon: int
    objective: object
    state_boxes: Optional[list] = None
    input_box: Optional[Box] = None
    warm_start: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "x0", as_float_vector(self.x0, "x0", size=self.model.n))
        q = int(self.horizon)
        if q < 1:
            raise ValueError(f"horizon must be >= 1, got {q}")
        object.__setattr__(self, "horizon", q)
        if self.input_box is None:
            object.__setattr__(self, "input_box", self.model.input_box)
        if isinstance(self.objective, MinGammaAt):
            if not 1 <= self.objective.j <= q:
                raise ValueError("endpoint index j must lie in [1, horizon]")
        if self.state_boxes is not None:
            if len(self.state_boxes) != q + 1:
                raise ValueError("state_boxes must have horizon+1 entries")
            b0 = self.state_boxes[0]
            # tolerance matches the solver's feasibility tolerance so a
            # closed loop running at that tolerance cannot wedge itself
            if b0 is not None and not b0.contains(self.x0, tol=1e-6):
                raise ValueError("x0 violates the step-0 state box")
        if self.warm_start is not None:
            ws = as_float_matrix(self.warm_start, "warm_start", shape=(q, self.model.m))
            object.__setattr__(self, "warm_start", ws)


@dataclass
class OcpSolution:
    """Solver output; dynamics hold exactly along (x_seq, u_seq).

    ``gamma_profile[j-1]`` is Gamma(x_seq[j]) for j = 1..q and ``j_opt`` its
    argmin (ties resolved to the smallest j).  ``cost`` is the objective
    re-evaluated on the returned trajectory with the hard min.
    """

    u_seq: np.ndarray
    x_seq: np.ndarray
    gamma_profile: np.ndarray
    j_opt: int
    cost: float
    status: str
    n_iter: int = 0
    max_violation: float = 0.0


# ---------------------------------------------------------------------------
# stacked problem core
# ---------------------------------------------------------------------------

@dataclass
class ProblemStack:
    """A batch of single-shooting problems sharing one plant and one
    padded horizon.

    Arrays are indexed [problem] or [problem, step].  ``endpoint[i]`` is the
    1-based step whose Gamma enters problem i's objective, or -1 for a
    soft-min over all steps 1..q[i].  ``cons_lo/cons_hi`` have shape
    (Q_max+1, n) with +-inf where unconstrained; rows beyond q[i] are
    ignored for problem i.
    """

    model: object
    x0: np.ndarray          # (B, n)
    q: np.ndarray           # (B,) int
    endpoint: np.ndarray    # (B,) int
    theta: np.ndarray       # (B,)
    xi: np.ndarray          # (B,)
    Q: np.ndarray           # (n, n)
    R: np.ndarray           # (m, m)
    P_gamma: np.ndarray     # (n, n)
    cons_lo: np.ndarray     # (Q_max+1, n)
    cons_hi: np.ndarray
    u_lo: np.ndarray        # (m,)
    u_hi: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray

    @property
    def B(self):
        return self.x0.shape[0]

    @property
    def Q_max(self):
        return int(self.q.max())


@dataclass
class StackResult:
    u: np.ndarray            # (B, Q_max, m)
    value: np.ndarray        # (B,) penalized-objective-free true objective
    violation: np.ndarray    # (B,) worst state-box violation
    converged: np.ndarray    # (B,) bool: projected-gradient norm <= tol
    n_iter: np.ndarray       # (B,) int


def _rollout_stack(stack, u):
    """States (B, Q_max+1, n) under nominal dynamics; steps past q[i] are
    rolled too (harmless: masked out of every objective term)."""
    B, Q_max = u.shape[0], u.shape[1]
    xs = np.empty((B, Q_max + 1, stack.x0.shape[1]))
    xs[:, 0] = stack.x0
    for t in range(Q_max):
        xs[:, t + 1] = stack.model.step_nominal(xs[:, t], u[:, t])
    return xs


def _hinge(stack, xs):
    """l1 state-box violation per (problem, step), masked to steps <= q."""
    lo = stack.cons_lo[None, :, :]
    hi = stack.cons_hi[None, :, :]
    v = np.maximum(lo - xs, 0.0) + np.maximum(xs - hi, 0.0)
    v = np.where(np.isfinite(v), v, 0.0)
    steps = np.arange(xs.shape[1])[None, :]
    mask = steps <= stack.q[:, None]
    return v.sum(axis=2) * mask


def _stack_terms(stack, u, beta=None):
    """Objective pieces for the stack at input u.

    Returns (xs, stage_sum, gamma_all, endpoint_gamma, hinge_sum) where
    ``endpoint_gamma`` is the Gamma term entering the objective (hard
    endpoint or soft-min with sharpness beta).
    """
    xs = _rollout_stack(stack, u)
    dx = xs - stack.x_ref
    du = u - stack.u_ref
    lx = np.einsum("bti,ij,btj->bt", dx[:, :-1], stack.Q, dx[:, :-1])
    lu = np.einsum("bti,ij,btj->bt", du, stack.R, du)
    steps = np.arange(u.shape[1])[None, :]
    umask = steps < stack.q[:, None]
    stage = ((lx + lu) * umask).sum(axis=1)
    gam = np.einsum("bti,ij,btj->bt", dx, stack.P_gamma, dx)  # includes step 0
    gmask = (steps + 1) <= stack.q[:, None]                   # valid j = 1..q
    gam_j = np.where(gmask, gam[:, 1:], np.inf)
    hard = stack.endpoint >= 0
    end_gamma = np.empty(stack.B)
    if hard.any():
        idx = np.clip(stack.endpoint, 1, None)
        end_gamma[hard] = np.take_along_axis(gam, idx[:, None], axis=1)[:, 0][hard]
    if (~hard).any():
        if beta is None:
            raise ValueError("soft-min endpoint requires a sharpness beta")
        gmin = gam_j.min(axis=1)
        wsum = np.exp(-beta * (gam_j - gmin[:, None])).sum(axis=1)
        end_gamma[~hard] = (gmin - np.log(wsum) / beta)[~hard]
    viol = _hinge(stack, xs)
    return xs, stage, gam_j, end_gamma, viol.sum(axis=1)


def _stack_value(stack, u, rho, beta=None):
    _, stage, _, end_gamma, hinge = _stack_terms(stack, u, beta)
    return stack.theta * stage + stack.xi * end_gamma + rho * hinge


def _stack_gradient(stack, u, rho, beta=None):
    """Reverse-mode gradient of the penalized objective through the rollout."""
    xs = _rollout_stack(stack, u)
    B, Q_max, m = u.shape
    n = xs.shape[2]
    dx = xs - stack.x_ref
    steps = np.arange(Q_max)[None, :]
    umask = (steps < stack.q[:, None]).astype(float)
    # endpoint weights per (problem, j): hard -> one-hot, soft -> softmax
    gam = np.einsum("bti,ij,btj->bt", dx, stack.P_gamma, dx)
    gmask = (steps + 1) <= stack.q[:, None]
    gam_j = np.where(gmask, gam[:, 1:], np.inf)
    w = np.zeros((B, Q_max))
    hard = stack.endpoint >= 0
    if hard.any():
        rows = np.nonzero(hard)[0]
        w[rows, stack.endpoint[rows] - 1] = 1.0
    if (~hard).any():
        if beta is None:
            raise ValueError("soft-min endpoint requires a sharpness beta")
        gmin = gam_j.min(axis=1)
        e = np.exp(-beta * (gam_j - gmin[:, None]))
        e = np.where(gmask, e, 0.0)
        soft = e / e.sum(axis=1, keepdims=True)
        w[~hard] = soft[~hard]
    # per-step objective derivative w.r.t. x_t
    lo = stack.cons_lo[None, :, :]
    hi = stack.cons_hi[None, :, :]
    dhinge = (xs > hi).astype(float) - (xs < lo).astype(float)
    dhinge = np.where(np.isfinite(lo) | np.isfinite(hi), dhinge, 0.0)
    smask = (np.arange(Q_max + 1)[None, :] <= stack.q[:, None]).astype(float)
    dPg = dx @ (stack.P_gamma + stack.P_gamma.T)
    dQ = dx @ (stack.Q + stack.Q.T)
    grad_x = rho[:, None, None] * dhinge * smask[:, :, None]
    grad_x[:, :-1] += stack.theta[:, None, None] * dQ[:, :-1] * umask[:, :, None]
    grad_x[:, 1:] += stack.xi[:, None, None] * w[:, :, None] * dPg[:, 1:]
    # adjoint sweep
    du_ = u - stack.u_ref
    dR = du_ @ (stack.R + stack.R.T)
    g = np.zeros_like(u)
    lam = grad_x[:, Q_max].copy()
    for t in range(Q_max - 1, -1, -1):
        At = stack.model.jacobian_x(xs[:, t], u[:, t])
        Bt = stack.model.jacobian_u(xs[:, t], u[:, t])
        g[:, t] = np.einsum("bnm,bn->bm", Bt, lam)
        g[:, t] += stack.theta[:, None] * dR[:, t] * umask[:, t, None]
        lam = np.einsum("bnm,bn->bm", At, lam) + grad_x[:, t]
    g *= umask[:, :, None]
    return g


def solve_stack(stack, u0, budget, beta=None):
    """Spectral projected-gradient descent over the whole stack.

    Each problem carries its own step length and penalty weight; accepted
    steps grow the step length, rejected trials halve it while keeping the
    iterate, so per-problem objective values are non-increasing within a
    penalty round.  Returns a StackResult with the true (unpenalized)
    objective values.
    """
    u = np.clip(u0, stack.u_lo, stack.u_hi)
    B, Q_max, m = u.shape
    steps = np.arange(Q_max)[None, :]
    umask = (steps < stack.q[:, None])[:, :, None]
    rho = np.full(B, float(budget.penalty_init))
    rounds = np.zeros(B, dtype=int)
    n_iter = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    done = np.zeros(B, dtype=bool)
    while True:
        alpha = np.ones(B)
        stall = np.zeros(B, dtype=int)
        f_cur = _stack_value(stack, u, rho, beta)
        active = ~done
        it = 0
        while active.any() and it < budget.max_iter:
            g = _stack_gradient(stack, u, rho, beta)
            pg = np.clip(u - g, stack.u_lo, stack.u_hi) - u
            pg_norm = np.abs(np.where(umask, pg, 0.0)).max(axis=(1, 2))
            newly = active & (pg_norm <= budget.tol)
            converged |= newly
            active &= ~newly
            if not active.any():
                break
            trial = np.clip(u - alpha[:, None, None] * g, stack.u_lo, stack.u_hi)
            du = np.where(umask, trial - u, 0.0)
            f_trial = _stack_value(stack, np.where(umask, trial, u), rho, beta)
            decrease = (g * du).sum(axis=(1, 2))
            ok = active & (f_trial <= f_cur + 1e-4 * decrease + 1e-15)
            improved = ok & (f_cur - f_trial > budget.ftol * (1.0 + np.abs(f_cur)))
            take = ok[:, None, None] & umask
            u = np.where(take, trial, u)
            f_cur = np.where(ok, f_trial, f_cur)
            alpha = np.where(ok, np.minimum(alpha * 1.3, 1e6), alpha * 0.5)
            alpha = np.maximum(alpha, 1e-14)
            stall = np.where(improved, 0, stall + active)
            active &= stall < budget.stall_limit
            n_iter += active
            it += 1
        # penalty round bookkeeping
        xs = _rollout_stack(stack, u)
        viol = _hinge(stack, xs).max(axis=1)
        need_more = (~done) & (viol > budget.feas_tol) & (rounds < budget.max_penalty_rounds)
        done |= ~need_more
        if not need_more.any():
            break
        rho = np.where(need_more, rho * budget.penalty_growth, rho)
        rounds += need_more
        converged &= ~need_more
    _, stage, gam_j, end_gamma, _ = _stack_terms(stack, u, beta)
    if (stack.endpoint < 0).any():
        # soft-min branches report the hard min for reduction purposes
        soft = stack.endpoint < 0
        end_gamma = np.where(soft, gam_j.min(axis=1), end_gamma)
    value = stack.theta * stage + stack.xi * end_gamma
    return StackResult(u=u, value=value, violation=viol, converged=converged, n_iter=n_iter)


# ---------------------------------------------------------------------------
# single-problem front end
# ---------------------------------------------------------------------------

def rollout_nominal(model, x0, u_seq):
    """Nominal trajectory (q+1, n) for a single input sequence."""
    xs = [as_float_vector(x0, "x0", size=model.n)]
    u_seq = np.asarray(u_seq, dtype=float)
    for t in range(u_seq.shape[0]):
        xs.append(model.step_nominal(xs[-1], u_seq[t]))
    return np.stack(xs)


def _objective_pieces(problem):
    obj = problem.objective
    n, m = problem.model.n, problem.model.m
    if isinstance(obj, MinGammaAt):
        return 0.0, 1.0, np.zeros((n, n)), np.zeros((m, m)), check_spd(obj.P_gamma, "P_gamma"), [obj.j]
    if isinstance(obj, MinGammaOverHorizon):
        return 0.0, 1.0, np.zeros((n, n)), np.zeros((m, m)), check_spd(obj.P_gamma, "P_gamma"), list(range(1, problem.horizon + 1))
    if isinstance(obj, FullCost):
        Q = as_float_matrix(obj.Q, "Q", shape=(n, n))
        R = as_float_matrix(obj.R, "R", shape=(m, m))
        return float(obj.theta), float(obj.xi), Q, R, check_spd(obj.P_gamma, "P_gamma"), list(range(1, problem.horizon + 1))
    raise ValueError(f"unknown objective {type(obj).__name__}")


def _constraint_rows(problem):
    q, n = problem.horizon, problem.model.n
    lo = np.full((q + 1, n), -np.inf)
    hi = np.full((q + 1, n), np.inf)
    if problem.state_boxes is not None:
        for j, box in enumerate(problem.state_boxes):
            if box is None:
                continue
            if box.is_empty:
                raise ValueError(f"state box at step {j} is empty")
            lo[j] = box.lo
            hi[j] = box.hi
    return lo, hi


def _starts(problem, budget):
    """Initial input sequences: warm start first, then zeros, u_ref, uniforms."""
    q, m = problem.horizon, problem.model.m
    rng = np.random.default_rng(budget.seed)
    outs = []
    if problem.warm_start is not None:
        outs.append(np.asarray(problem.warm_start, dtype=float))
    outs.append(np.zeros((q, m)))
    outs.append(np.tile(problem.model.u_ref, (q, 1)))
    while len(outs) < max(budget.n_starts, 1):
        outs.append(problem.input_box.sample(rng, q))
    return [np.clip(s, problem.input_box.lo, problem.input_box.hi) for s in outs[: max(budget.n_starts, 1)]]


def _evaluate_candidate(problem, u_seq, theta, xi, Q, R, P_gamma, lo, hi):
    """True objective, trajectory, and worst violation for one input sequence."""
    xs = rollout_nominal(problem.model, problem.x0, u_seq)
    dx = xs - problem.model.x_ref
    du = u_seq - problem.model.u_ref
    stage = float(np.einsum("ti,ij,tj->", dx[:-1], Q, dx[:-1]) + np.einsum("ti,ij,tj->", du, R, du))
    gam = np.einsum("ti,ij,tj->t", dx, P_gamma, dx)
    profile = gam[1:]
    j_opt = _argmin_tied(profile)
    if isinstance(problem.objective, MinGammaAt):
        gterm = gam[problem.objective.j]
    else:
        gterm = profile[j_opt - 1]
    cost = theta * stage + xi * gterm
    v = np.maximum(lo - xs, 0.0) + np.maximum(xs - hi, 0.0)
    viol = float(np.where(np.isfinite(v), v, 0.0).max()) if v.size else 0.0
    return cost, xs, profile, j_opt, viol


def _argmin_tied(values):
    """1-based argmin with ties within _TIE_TOL resolved to the smallest index."""
    best = values.min()
    return int(np.nonzero(values <= best + _TIE_TOL)[0][0]) + 1


def solve(problem, budget=None):
    """Solve one OcpProblem with multi-start and the stacked core.

    All starts are evaluated as candidates before and after descent, so a
    feasible warm start can never be beaten by a worse return value.  The
    reduction is deterministic: best true cost, infeasible branches last,
    ties by start order.
    """
    budget = budget or SolverBudget()
    theta, xi, Q, R, P_gamma, endpoints = _objective_pieces(problem)
    lo, hi = _constraint_rows(problem)
    starts = _starts(problem, budget)
    n_s, n_e = len(starts), len(endpoints)
    use_soft = budget.soft_min and not isinstance(problem.objective, MinGammaAt) and n_e > 1
    ends = np.array([-1] if use_soft else endpoints, dtype=int)
    n_e = ends.size
    B = n_s * n_e
    stack = ProblemStack(
        model=problem.model,
        x0=np.tile(problem.x0, (B, 1)),
        q=np.full(B, problem.horizon, dtype=int),
        endpoint=np.repeat(ends, n_s),
        theta=np.full(B, theta),
        xi=np.full(B, xi),
        Q=Q,
        R=R,
        P_gamma=P_gamma,
        cons_lo=lo,
        cons_hi=hi,
        u_lo=problem.input_box.lo,
        u_hi=problem.input_box.hi,
        x_ref=problem.model.x_ref,
        u_ref=problem.model.u_ref,
    )
    u0 = np.concatenate([np.stack(starts)] * n_e, axis=0)
    if use_soft:
        res = None
        for b in budget.soft_min_betas:
            res = solve_stack(stack, u0 if res is None else res.u, budget, beta=b)
    else:
        res = solve_stack(stack, u0, budget)
    # candidate set: every solved branch plus every raw start
    cands = [(res.u[i], res.converged[i], int(res.n_iter[i]), i % n_s) for i in range(B)]
    cands += [(s, True, 0, k) for k, s in enumerate(starts)]
    best = None
    for u_seq, conv, iters, start_idx in cands:
        u_seq = u_seq[: problem.horizon]
        cost, xs, profile, j_opt, viol = _evaluate_candidate(
            problem, u_seq, theta, xi, Q, R, P_gamma, lo, hi
        )
        feasible = viol <= budget.feas_tol
        key = (not feasible, cost if feasible else viol, start_idx)
        if best is None or key < best[0]:
            best = (key, u_seq, cost, xs, profile, j_opt, conv, iters, viol)
    _, u_seq, cost, xs, profile, j_opt, conv, iters, viol = best
    feasible = viol <= budget.feas_tol
    if not feasible:
        status = INFEASIBLE
    elif conv:
        status = OPTIMAL_LOCAL
    else:
        status = MAX_ITER
    return OcpSolution(
        u_seq=u_seq,
        x_seq=xs,
        gamma_profile=profile,
        j_opt=j_opt,
        cost=cost,
        status=status,
        n_iter=iters,
        max_violation=viol,
    )


def gradient(problem, u_seq, penalty_weight=0.0, softmin_beta=1e3):
    """Gradient of the (optionally penalized) objective at ``u_seq``.

    Min-over-horizon objectives use the soft-min surrogate with sharpness
    ``softmin_beta`` so the result is smooth; endpoint objectives are exact.
    """
    theta, xi, Q, R, P_gamma, endpoints = _objective_pieces(problem)
    lo, hi = _constraint_rows(problem)
    u_seq = as_float_matrix(u_seq, "u_seq", shape=(problem.horizon, problem.model.m))
    single_end = isinstance(problem.objective, MinGammaAt)
    stack = ProblemStack(
        model=problem.model,
        x0=problem.x0[None, :],
        q=np.array([problem.horizon]),
        endpoint=np.array([problem.objective.j if single_end else -1]),
        theta=np.array([theta]),
        xi=np.array([xi]),
        Q=Q,
        R=R,
        P_gamma=P_gamma,
        cons_lo=lo,
        cons_hi=hi,
        u_lo=problem.input_box.lo,
        u_hi=problem.input_box.hi,
        x_ref=problem.model.x_ref,
        u_ref=problem.model.u_ref,
    )
    g = _stack_gradient(
        stack, u_seq[None, :, :], np.array([penalty_weight]), beta=None if single_end else softmin_beta
    )
    return g[0]

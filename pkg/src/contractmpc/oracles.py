"""Independent reference computations used by the test suite.

Everything here is reimplemented from scratch on purpose: plain loops,
exact (``math.fsum``) accumulation, generic scipy optimizers.  None of it
shares a code path with the production modules, so agreement between the
two is evidence rather than tautology.  Nothing in this module is needed
at runtime.
"""

import itertools
import math

import numpy as np
from scipy.linalg import solve_discrete_are
from scipy.optimize import minimize


def oracle_tightening(L_x, L_w, w_bar, n_max):
    """(c, d) tables of shape (N+1, n) via exactly rounded summation.

    The production recursion accumulates with numpy dot products; this one
    uses ``math.fsum`` per entry, so the two agree only if neither loses
    precision along the way.
    """
    L_x = np.asarray(L_x, dtype=float)
    L_w = np.asarray(L_w, dtype=float)
    w_bar = np.asarray(w_bar, dtype=float)
    n = L_x.shape[0]
    c = [[math.fsum(L_w[i][k] * w_bar[k] for k in range(len(w_bar))) for i in range(n)]]
    for _ in range(n_max):
        prev = c[-1]
        c.append([math.fsum(L_x[i][a] * prev[a] for a in range(n)) for i in range(n)])
    d = [[0.0] * n]
    for j in range(1, n_max + 1):
        d.append([math.fsum(c[k][i] for k in range(j)) for i in range(n)])
    return np.array(c), np.array(d)


def oracle_quadratic_max_vertices(P, lo, hi, center):
    """max of (x-center)' P (x-center) over the box, by explicit vertex
    enumeration with exact accumulation.  Valid for positive semidefinite
    P, where the maximum of a convex function over a box is at a vertex.
    """
    P = np.asarray(P, dtype=float)
    best = -math.inf
    for corner in itertools.product(*zip(np.asarray(lo, float), np.asarray(hi, float))):
        v = np.asarray(corner) - np.asarray(center, float)
        n = v.size
        best = max(best, math.fsum(v[i] * P[i][j] * v[j]
                                   for i in range(n) for j in range(n)))
    return best


def oracle_quadratic_max_dense(P, lo, hi, center, points_per_axis=25):
    """Dense-scan lower bound for the same maximum; works for any P."""
    axes = [np.linspace(l, h, points_per_axis) for l, h in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    diff = pts - np.asarray(center, float)
    return float(np.einsum("bi,ij,bj->b", diff, np.asarray(P, float), diff).max())


def oracle_sublevel_in_box(P, center, level, lo, hi, count=20_000, seed=0):
    """Worst box margin over sampled boundary points of {x: Gamma(x) <= level}.

    Nonnegative means every sampled boundary point is inside the box.  The
    boundary is sampled by scaling random directions to the level set.
    """
    rng = np.random.default_rng(seed)
    P = np.asarray(P, dtype=float)
    center = np.asarray(center, dtype=float)
    dirs = rng.normal(size=(count, center.size))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    quad = np.einsum("bi,ij,bj->b", dirs, P, dirs)
    pts = center + dirs * np.sqrt(level / quad)[:, None]
    margin = np.minimum(pts - np.asarray(lo, float), np.asarray(hi, float) - pts)
    return float(margin.min())


def oracle_fd_gradient(fun, z, h=1e-6):
    """Central-difference gradient of a scalar function, one loop per entry."""
    z = np.asarray(z, dtype=float)
    g = np.empty_like(z)
    for i in range(z.size):
        step = h * (1.0 + abs(z.flat[i]))
        zp, zm = z.copy(), z.copy()
        zp.flat[i] += step
        zm.flat[i] -= step
        g.flat[i] = (fun(zp) - fun(zm)) / (2.0 * step)
    return g


def oracle_riccati_terminal(A, B, Q, R, kappa):
    """(P, K) satisfying A_K' P A_K - (1-kappa) P + Q + K' R K = 0.

    Substituting A/sqrt(1-kappa), B/sqrt(1-kappa), Q/(1-kappa), R/(1-kappa)
    into the standard discrete Riccati equation and scaling back turns the
    kappa-discounted inequality into an equality, so the returned pair
    meets the terminal-decrease condition with zero slack (up to the
    Riccati solver's own accuracy).
    """
    s = 1.0 - float(kappa)
    At = np.asarray(A, float) / math.sqrt(s)
    Bt = np.asarray(B, float) / math.sqrt(s)
    Qt = np.asarray(Q, float) / s
    Rt = np.asarray(R, float) / s
    P = solve_discrete_are(At, Bt, Qt, Rt)
    K = -np.linalg.solve(Rt + Bt.T @ P @ Bt, Bt.T @ P @ At)
    return P, K


def _rollout(model, x0, u):
    """Nominal trajectory for a (q, m) input plan, one step at a time."""
    xs = [np.asarray(x0, dtype=float)]
    for t in range(u.shape[0]):
        xs.append(model.step_nominal(xs[-1], u[t]))
    return np.array(xs)


def _plan_cost_grad(model, x0, u, theta, xi, Q, R, P_gamma, j_end, rho, cons_lo, cons_hi):
    """Objective, gradient, and worst constraint violation for one plan.

    Objective: theta * sum of stage costs + xi * Gamma at step ``j_end``
    plus a rho-weighted squared hinge on the per-step state boxes.  The
    gradient is a hand-rolled adjoint pass over the model Jacobians.
    """
    q, m = u.shape
    xs = _rollout(model, x0, u)
    dx = xs - model.x_ref
    du = u - model.u_ref
    stage_x = dx[:q] @ Q
    stage_u = du @ R
    cost = theta * float((dx[:q] * stage_x).sum() + (du * stage_u).sum())
    gam_vec = dx[j_end] @ P_gamma
    cost += xi * float(dx[j_end] @ gam_vec)
    over = np.maximum(xs - cons_hi[: q + 1], 0.0)
    under = np.maximum(cons_lo[: q + 1] - xs, 0.0)
    hinge = over - under
    cost += rho * float((hinge**2).sum())
    viol = float(np.maximum(over, under).max()) if xs.size else 0.0

    # adjoint: lam[t] = d cost / d xs[t], swept backwards through f
    lam = 2.0 * rho * hinge
    lam[:q] += 2.0 * theta * stage_x
    lam[j_end] += 2.0 * xi * gam_vec
    grad = np.empty_like(u)
    carry = lam[q]
    for t in range(q - 1, -1, -1):
        Jx = model.jac_x(xs[t], u[t])
        Ju = model.jac_u(xs[t], u[t])
        grad[t] = carry @ Ju + 2.0 * theta * stage_u[t]
        carry = carry @ Jx + lam[t]
    return cost, grad, viol


def oracle_min_over_q(model, x0, theta, xi, Q, R, P_gamma, cons_lo, cons_hi,
                      n_p, s_starts=25, seed=0, feas_tol=1e-6):
    """Dense multistart reference for the per-step optimal cost.

    Every horizon/endpoint pair (q, j <= q) is solved separately with
    L-BFGS-B from ``s_starts`` starting plans, penalty rounds enforcing
    the tightened state boxes, and an exact feasibility-filtered final
    evaluation.  Returns (best value, best q); +inf if nothing feasible.
    """
    rng = np.random.default_rng(seed)
    u_lo, u_hi = model.input_box.lo, model.input_box.hi
    m = u_lo.size
    best_val, best_q = math.inf, 0
    for q in range(1, n_p + 1):
        bounds = list(zip(np.tile(u_lo, q), np.tile(u_hi, q)))
        starts = [np.zeros((q, m)), np.tile(model.u_ref, (q, 1))]
        while len(starts) < s_starts:
            starts.append(rng.uniform(u_lo, u_hi, size=(q, m)))
        for j_end in range(1, q + 1):
            for u0 in starts:
                u = u0.copy()
                for rho in (1e2, 1e4, 1e6):
                    res = minimize(
                        lambda z: _plan_cost_grad(
                            model, x0, z.reshape(q, m), theta, xi, Q, R,
                            P_gamma, j_end, rho, cons_lo, cons_hi)[:2],
                        u.ravel(), jac=True, method="L-BFGS-B", bounds=bounds,
                        options={"maxiter": 80})
                    u = res.x.reshape(q, m)
                val, _, viol = _plan_cost_grad(model, x0, u, theta, xi, Q, R,
                                               P_gamma, j_end, 0.0, cons_lo, cons_hi)
                if viol <= feas_tol and val < best_val:
                    best_val, best_q = val, q
    return best_val, best_q

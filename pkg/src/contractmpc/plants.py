"""Discrete-time perturbed plant models.

A plant is x(k+1) = f(x(k), u(k), w(k)) with box constraints on states,
inputs, and disturbances, a regulation target (x_ref, u_ref) that is an
equilibrium of the nominal dynamics, and element-wise Lipschitz bound
matrices (L_x, L_u, L_w) that drive the constraint tightening.

Two benchmark plants ship with the package: a nonholonomic integrator with
a multiplicative input disturbance, and a quadruple-tank process where the
disturbance perturbs the valve split ratios.  A deadbeat toy plant is
included for fast exact tests.
"""

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .boxes import Box
from .validation import as_float_matrix, as_float_vector, check_nonnegative_matrix

__all__ = [
    "PlantModel",
    "make_nonholonomic",
    "make_quadruple_tank",
    "make_deadbeat_toy",
    "plant_from_config",
    "plant_to_config",
    "audit_lipschitz",
]

_FD_STEP = 1e-6


@dataclass
class PlantModel:
    """Perturbed discrete-time system with constraint and Lipschitz data.

    The dynamics callable must broadcast over leading axes: inputs of shape
    (..., n), (..., m), (..., r) give an output of shape (..., n).  Jacobian
    callables are optional; finite differences fill in when absent.

    Attributes
    ----------
    name : str
        Identifier used in configs and reports.
    n, m, r : int
        State, input, and disturbance dimensions.
    f : callable
        Dynamics ``f(x, u, w) -> x_next``.
    state_box, input_box, dist_box : Box
        Hard constraint sets X and U, and the disturbance box W.
    x_ref, u_ref : ndarray
        Regulation target; an equilibrium of ``f(., ., 0)``.
    L_x, L_u, L_w : ndarray
        Element-wise Lipschitz bounds: |f_i(x,u,w) - f_i(y,v,w)| <=
        sum_a L_x[i,a] |x_a - y_a| + sum_b L_u[i,b] |u_b - v_b| and
        |f_i(x,u,w) - f_i(x,u,0)| <= sum_c L_w[i,c] |w_c| on X x U x W.
    """

    name: str
    n: int
    m: int
    r: int
    f: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    state_box: Box
    input_box: Box
    dist_box: Box
    x_ref: np.ndarray
    u_ref: np.ndarray
    L_x: np.ndarray
    L_u: np.ndarray
    L_w: np.ndarray
    jac_x: Optional[Callable] = None
    jac_u: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_ref = as_float_vector(self.x_ref, "x_ref", size=self.n)
        self.u_ref = as_float_vector(self.u_ref, "u_ref", size=self.m)
        self.L_x = check_nonnegative_matrix(as_float_matrix(self.L_x, "L_x", shape=(self.n, self.n)), "L_x")
        self.L_u = check_nonnegative_matrix(as_float_matrix(self.L_u, "L_u", shape=(self.n, self.m)), "L_u")
        self.L_w = check_nonnegative_matrix(as_float_matrix(self.L_w, "L_w", shape=(self.n, self.r)), "L_w")
        if self.state_box.dim != self.n:
            raise ValueError("state_box dimension disagrees with n")
        if self.input_box.dim != self.m:
            raise ValueError("input_box dimension disagrees with m")
        if self.dist_box.dim != self.r:
            raise ValueError("dist_box dimension disagrees with r")
        if np.abs(self.dist_box.lo + self.dist_box.hi).max() > 1e-12:
            raise ValueError("dist_box must be origin-symmetric")
        # published targets are rounded to a handful of decimals, so the
        # equilibrium gate is loose; exact plants sit at machine precision
        res = np.abs(self.step_nominal(self.x_ref, self.u_ref) - self.x_ref).max()
        if res > 1e-3:
            raise ValueError(
                f"(x_ref, u_ref) is not a nominal equilibrium (residual {res:.3g} > 1e-3)"
            )

    def step(self, x, u, w):
        return self.f(np.asarray(x, dtype=float), np.asarray(u, dtype=float), np.asarray(w, dtype=float))

    def step_nominal(self, x, u):
        """Dynamics with the disturbance pinned to zero."""
        x = np.asarray(x, dtype=float)
        w = np.zeros(x.shape[:-1] + (self.r,))
        return self.step(x, u, w)

    # -- Jacobians (analytic when provided, central differences otherwise) --
    # broadcast over leading axes like the dynamics: (..., n) -> (..., n, n)

    def jacobian_x(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.jac_x is not None:
            return np.asarray(self.jac_x(x, u), dtype=float)
        return _fd_jac_batched(lambda z, v: self.step_nominal(z, v), x, u, wrt="x")

    def jacobian_u(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.jac_u is not None:
            return np.asarray(self.jac_u(x, u), dtype=float)
        return _fd_jac_batched(lambda z, v: self.step_nominal(z, v), x, u, wrt="u")


def _fd_jac_batched(fun, x, u, wrt):
    """Central-difference Jacobian with a scale-aware step, batched over
    shared leading axes of (x, u)."""
    z0 = x if wrt == "x" else u
    nz = z0.shape[-1]
    f0 = np.asarray(fun(x, u), dtype=float)
    J = np.empty(f0.shape + (nz,))
    for j in range(nz):
        h = _FD_STEP * (1.0 + np.abs(z0[..., j]))
        zp = z0.copy()
        zm = z0.copy()
        zp[..., j] = z0[..., j] + h
        zm[..., j] = z0[..., j] - h
        fp = fun(zp, u) if wrt == "x" else fun(x, zp)
        fm = fun(zm, u) if wrt == "x" else fun(x, zm)
        J[..., j] = (np.asarray(fp) - np.asarray(fm)) / (2.0 * h)[..., None]
    return J


# ---------------------------------------------------------------------------
# nonholonomic integrator
# ---------------------------------------------------------------------------

def _nonholonomic_f(x, u, w):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    u1, u2 = u[..., 0], u[..., 1]
    w1 = w[..., 0]
    return np.stack(
        [x1 + (1.0 + w1) * u1, x2 + u2, x3 + x1 * u2],
        axis=-1,
    )


def _nonholonomic_jac_x(x, u):
    J = np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()
    J[..., 2, 0] = u[..., 1]
    return J


def _nonholonomic_jac_u(x, u):
    J = np.zeros(x.shape[:-1] + (3, 2))
    J[..., 0, 0] = 1.0
    J[..., 1, 1] = 1.0
    J[..., 2, 1] = x[..., 0]
    return J


def make_nonholonomic():
    """Three-state nonholonomic integrator with a multiplicative drift disturbance.

    The disturbance scales the first input channel, so the plant can be
    steered exactly along x2 and x3 once x1 is parked at the origin.
    """
    return PlantModel(
        name="nonholonomic",
        n=3,
        m=2,
        r=1,
        f=_nonholonomic_f,
        state_box=Box.symmetric([4.0, 10.0, 10.0]),
        input_box=Box.symmetric([8.0, 0.5]),
        dist_box=Box.symmetric([0.025]),
        x_ref=np.zeros(3),
        u_ref=np.zeros(2),
        L_x=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.0, 1.0]]),
        L_u=np.array([[1.025, 0.0], [0.0, 1.0], [0.0, 4.0]]),
        L_w=np.array([[8.0], [0.0], [0.0]]),
        jac_x=_nonholonomic_jac_x,
        jac_u=_nonholonomic_jac_u,
    )


# ---------------------------------------------------------------------------
# quadruple-tank process
# ---------------------------------------------------------------------------

_TANK = {
    "Ts": 15.0,
    "g": 9.81,
    "S": 0.06,
    "a": (1.2938e-4, 1.5041e-4, 1.0208e-4, 9.3258e-5),
    "gamma_a": 0.3,
    "gamma_b": 0.4,
}


def _tank_f(x, u, w):
    Ts, g, S = _TANK["Ts"], _TANK["g"], _TANK["S"]
    a1, a2, a3, a4 = _TANK["a"]
    ga, gb = _TANK["gamma_a"], _TANK["gamma_b"]
    # levels are clipped at 0 inside the sqrt only to keep finite-difference
    # probes near the constraint boundary well defined
    h = np.maximum(x, 0.0)
    s1, s2, s3, s4 = (np.sqrt(2.0 * g * h[..., i]) for i in range(4))
    q1 = u[..., 0] / 3600.0  # pump flows are configured in m^3/h
    q2 = u[..., 1] / 3600.0
    w1, w2 = w[..., 0], w[..., 1]
    h1 = x[..., 0] + Ts * (-a1 * s1 + a3 * s3) / S + (ga + w1) * Ts * q1 / S
    h2 = x[..., 1] + Ts * (-a2 * s2 + a4 * s4) / S + (gb + w2) * Ts * q2 / S
    h3 = x[..., 2] - Ts * a3 * s3 / S + (1.0 - gb - w2) * Ts * q2 / S
    h4 = x[..., 3] - Ts * a4 * s4 / S + (1.0 - ga - w1) * Ts * q1 / S
    return np.stack([h1, h2, h3, h4], axis=-1)


def _tank_jac_x(x, u):
    Ts, g, S = _TANK["Ts"], _TANK["g"], _TANK["S"]
    a = np.array(_TANK["a"])
    d = Ts * a * np.sqrt(g / (2.0 * np.maximum(x, 1e-12))) / S  # (..., 4)
    J = np.broadcast_to(np.eye(4), x.shape[:-1] + (4, 4)).copy()
    J[..., 0, 0] -= d[..., 0]
    J[..., 0, 2] = d[..., 2]
    J[..., 1, 1] -= d[..., 1]
    J[..., 1, 3] = d[..., 3]
    J[..., 2, 2] -= d[..., 2]
    J[..., 3, 3] -= d[..., 3]
    return J


def _tank_jac_u(x, u):
    Ts, S = _TANK["Ts"], _TANK["S"]
    ga, gb = _TANK["gamma_a"], _TANK["gamma_b"]
    k = Ts / (3600.0 * S)
    J = np.array([[ga * k, 0.0], [0.0, gb * k], [0.0, (1.0 - gb) * k], [(1.0 - ga) * k, 0.0]])
    return np.broadcast_to(J, x.shape[:-1] + (4, 2)).copy()


def make_quadruple_tank():
    """Quadruple-tank process, forward-Euler discretized at 15 s.

    States are the four tank levels in metres, inputs the two pump flows in
    m^3/h, and the disturbance perturbs the two valve split ratios.
    """
    return PlantModel(
        name="quadruple_tank",
        n=4,
        m=2,
        r=2,
        f=_tank_f,
        state_box=Box(np.array([0.2, 0.2, 0.2, 0.2]), np.array([1.36, 1.36, 1.30, 1.30])),
        input_box=Box(np.zeros(2), np.array([3.6, 4.0])),
        dist_box=Box.symmetric([0.0325, 0.0325]),
        x_ref=np.array([0.6702, 0.6549, 0.5435, 0.5887]),
        u_ref=np.array([1.63, 2.0]),
        L_x=np.array(
            [
                [0.95, 0.0, 0.18, 0.0],
                [0.0, 0.95, 0.0, 0.15],
                [0.0, 0.0, 0.96, 0.0],
                [0.0, 0.0, 0.0, 0.96],
            ]
        ),
        L_u=np.array([[0.025, 0.0], [0.0, 0.035], [0.0, 0.17], [0.17, 0.0]]),
        L_w=np.array([[0.25, 0.0], [0.0, 0.275], [0.0, 0.275], [0.25, 0.0]]),
        jac_x=_tank_jac_x,
        jac_u=_tank_jac_u,
        params=dict(_TANK),
    )


# ---------------------------------------------------------------------------
# deadbeat toy (for fast exact tests)
# ---------------------------------------------------------------------------

def _deadbeat_f(x, u, w):
    return 0.5 * x + u + w


def make_deadbeat_toy():
    """Scalar plant x+ = 0.5 x + u + w; one input step can park the state."""
    return PlantModel(
        name="deadbeat_toy",
        n=1,
        m=1,
        r=1,
        f=_deadbeat_f,
        state_box=Box.symmetric([2.0]),
        input_box=Box.symmetric([2.0]),
        dist_box=Box.symmetric([0.01]),
        x_ref=np.zeros(1),
        u_ref=np.zeros(1),
        L_x=np.array([[0.5]]),
        L_u=np.array([[1.0]]),
        L_w=np.array([[1.0]]),
        jac_x=lambda x, u: np.broadcast_to(np.array([[0.5]]), np.shape(x)[:-1] + (1, 1)),
        jac_u=lambda x, u: np.broadcast_to(np.array([[1.0]]), np.shape(x)[:-1] + (1, 1)),
    )


_BUILTIN = {
    "nonholonomic": make_nonholonomic,
    "quadruple_tank": make_quadruple_tank,
    "deadbeat_toy": make_deadbeat_toy,
}


def plant_from_config(cfg):
    """Build a plant from a config dict (or a path to a JSON file).

    Only built-in dynamics are constructible from files; the config names
    them via ``dynamics``.  Constraint boxes, target, and Lipschitz data may
    be overridden per key; anything omitted keeps the built-in default.
    """
    if isinstance(cfg, (str, bytes)) or hasattr(cfg, "read"):
        with open(cfg) if isinstance(cfg, (str, bytes)) else cfg as fh:
            cfg = json.load(fh)
    name = cfg.get("dynamics")
    if name not in _BUILTIN:
        raise ValueError(f"unknown dynamics {name!r}; expected one of {sorted(_BUILTIN)}")
    plant = _BUILTIN[name]()
    boxes = {"state_box": None, "input_box": None, "dist_box": None}
    for key in boxes:
        if key in cfg:
            spec = cfg[key]
            boxes[key] = Box(np.asarray(spec["lo"], float), np.asarray(spec["hi"], float))
    overrides = {}
    for key in ("x_ref", "u_ref", "L_x", "L_u", "L_w"):
        if key in cfg:
            overrides[key] = np.asarray(cfg[key], dtype=float)
    if not any(boxes.values()) and not overrides:
        return plant
    return PlantModel(
        name=plant.name,
        n=plant.n,
        m=plant.m,
        r=plant.r,
        f=plant.f,
        state_box=boxes["state_box"] or plant.state_box,
        input_box=boxes["input_box"] or plant.input_box,
        dist_box=boxes["dist_box"] or plant.dist_box,
        x_ref=overrides.get("x_ref", plant.x_ref),
        u_ref=overrides.get("u_ref", plant.u_ref),
        L_x=overrides.get("L_x", plant.L_x),
        L_u=overrides.get("L_u", plant.L_u),
        L_w=overrides.get("L_w", plant.L_w),
        jac_x=plant.jac_x,
        jac_u=plant.jac_u,
        params=plant.params,
    )


def plant_to_config(plant):
    """Serializable dict round-trippable through ``plant_from_config``."""
    return {
        "dynamics": plant.name,
        "state_box": {"lo": plant.state_box.lo.tolist(), "hi": plant.state_box.hi.tolist()},
        "input_box": {"lo": plant.input_box.lo.tolist(), "hi": plant.input_box.hi.tolist()},
        "dist_box": {"lo": plant.dist_box.lo.tolist(), "hi": plant.dist_box.hi.tolist()},
        "x_ref": plant.x_ref.tolist(),
        "u_ref": plant.u_ref.tolist(),
        "L_x": plant.L_x.tolist(),
        "L_u": plant.L_u.tolist(),
        "L_w": plant.L_w.tolist(),
    }


def audit_lipschitz(plant, n_pairs=1000, seed=0):
    """Empirically check the element-wise Lipschitz bounds on sampled pairs.

    Draws ``n_pairs`` random triple pairs (x,u,w), (x',u',w') from
    X x U x W and verifies, per component,

        |f_i(x,u,w) - f_i(x',u',w')|
            <= (L_x |x - x'| + L_u |u - u'| + L_w |w - w'|)_i .

    Returns the worst signed margin (bound minus observed difference); a
    negative return means a violation was found.  The bound tables are
    user-supplied, so this is a usage audit, not a derivation.
    """
    rng = np.random.default_rng(seed)
    X, U, W = plant.state_box, plant.input_box, plant.dist_box
    xa, xb = X.sample(rng, n_pairs), X.sample(rng, n_pairs)
    ua, ub = U.sample(rng, n_pairs), U.sample(rng, n_pairs)
    wa, wb = W.sample(rng, n_pairs), W.sample(rng, n_pairs)
    diff = np.abs(plant.step(xa, ua, wa) - plant.step(xb, ub, wb))
    bound = (
        np.abs(xa - xb) @ plant.L_x.T
        + np.abs(ua - ub) @ plant.L_u.T
        + np.abs(wa - wb) @ plant.L_w.T
    )
    return float((bound - diff).min())

"""Estimator-style front ends.

ContractionCertifier wraps tightening plus certification behind fit();
RobustContractionMPC wraps controller configuration behind fit() and maps
states to first inputs via predict().  Constructor arguments are stored
verbatim (scikit-learn convention), all resolution happens in fit, and
fitted artifacts get the trailing underscore.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .contraction import GridSpec, build_certificate, load_certificate
from .controller import (ControllerConfig, init_theta, solve_enumerated, solve_two_stage,
                         stage_cost_bound, step_batch, update_theta)
from .presets import get_preset
from .tightening import compute_tightening
from .validation import as_float_matrix

__all__ = ["ContractionCertifier", "RobustContractionMPC"]


class ContractionCertifier(BaseEstimator):
    """Builds a contraction certificate for a plant.

    Either name a ``preset`` or supply ``plant``/``P_gamma``/``rcis``/
    ``n_max`` explicitly; explicit arguments override preset fields.  The
    grid defaults to the preset's smoke profile (or the library default
    when no preset is named); pass ``grid_points`` to override.
    """

    def __init__(self, preset=None, plant=None, P_gamma=None, rcis=None,
                 n_max=None, grid_points=None, seed=0, pins=None, budget=None):
        self.preset = preset
        self.plant = plant
        self.P_gamma = P_gamma
        self.rcis = rcis
        self.n_max = n_max
        self.grid_points = grid_points
        self.seed = seed
        self.pins = pins
        self.budget = budget

    def _resolve(self):
        if self.preset is not None:
            p = get_preset(self.preset)
            plant = self.plant if self.plant is not None else p.model
            P_gamma = self.P_gamma if self.P_gamma is not None else p.P_gamma
            rcis = self.rcis if self.rcis is not None else p.rcis
            n_max = self.n_max if self.n_max is not None else p.n_max
            pins = self.pins if self.pins is not None else p.pins
            pts = self.grid_points if self.grid_points is not None else p.grid_smoke.points_per_axis
        else:
            if self.plant is None or self.P_gamma is None or self.rcis is None or self.n_max is None:
                raise ValueError("without a preset, plant, P_gamma, rcis, and n_max are required")
            plant, P_gamma, rcis, n_max = self.plant, self.P_gamma, self.rcis, self.n_max
            pins = self.pins or {}
            pts = self.grid_points
        grid = GridSpec(pts, seed=self.seed) if pts is not None else None
        return plant, P_gamma, rcis, int(n_max), pins, grid

    def fit(self, X=None, y=None):
        """Compute the tightening sequences and the certificate."""
        plant, P_gamma, rcis, n_max, pins, grid = self._resolve()
        self.plant_ = plant
        self.tightening_ = compute_tightening(plant, n_max)
        self.certificate_ = build_certificate(
            plant, P_gamma, rcis, self.tightening_, grid=grid,
            budget=self.budget, pins=pins,
        )
        self.n_p_ = self.certificate_.N_p
        self.gamma_ = self.certificate_.gamma
        self.omega_ = self.certificate_.omega
        self.gamma_table_ = dict(self.certificate_.gamma_table)
        return self

    def transform(self, X):
        """Certified metric values Gamma(x) for a batch of states."""
        if not hasattr(self, "certificate_"):
            raise NotFittedError("call fit() before transform()")
        X = np.atleast_2d(as_float_matrix(X, "X"))
        d = X - self.plant_.x_ref
        return np.einsum("bi,ij,bj->b", d, self.certificate_.P_gamma, d)


class RobustContractionMPC(BaseEstimator):
    """Contraction MPC wrapped as an estimator.

    fit() assembles the controller configuration (stage-cost bound, xi
    gate, tightened boxes); predict() maps states to first inputs with a
    freshly initialized controller weight per state; reset()/step() run a
    stateful closed loop.
    """

    def __init__(self, preset=None, plant=None, certificate=None, n_max=None,
                 Q=None, R=None, xi="auto", nu=0.99, eps=1e-8,
                 formulation="two_stage", budget=None):
        self.preset = preset
        self.plant = plant
        self.certificate = certificate
        self.n_max = n_max
        self.Q = Q
        self.R = R
        self.xi = xi
        self.nu = nu
        self.eps = eps
        self.formulation = formulation
        self.budget = budget

    def fit(self, X=None, y=None):
        if self.preset is not None:
            p = get_preset(self.preset)
            plant = self.plant if self.plant is not None else p.model
            cert = self.certificate if self.certificate is not None else p.reference_certificate
            n_max = self.n_max if self.n_max is not None else p.n_max
            Q = self.Q if self.Q is not None else p.Q
            R = self.R if self.R is not None else p.R
        else:
            plant, cert, n_max, Q, R = self.plant, self.certificate, self.n_max, self.Q, self.R
            if plant is None or cert is None:
                raise ValueError("without a preset, plant and certificate are required")
            if Q is None:
                Q = np.eye(plant.n)
            if R is None:
                R = np.eye(plant.m)
        if isinstance(cert, str):
            cert = load_certificate(cert)
        seq = compute_tightening(plant, int(n_max) if n_max is not None else cert.N_p)
        l_bar = stage_cost_bound(Q, R, plant.state_box, plant.input_box, plant.x_ref, plant.u_ref)
        self.config_ = ControllerConfig(
            model=plant, Q=np.asarray(Q, float), R=np.asarray(R, float), l_bar=l_bar,
            xi=self.xi, nu=self.nu, eps=self.eps, cert=cert, seq=seq,
            formulation=self.formulation, budget=self.budget,
        )
        self.l_bar_ = l_bar
        self.xi_ = self.config_.xi
        self.state_ = None
        return self

    def _check_fitted(self):
        if not hasattr(self, "config_"):
            raise NotFittedError("call fit() before using the controller")

    def predict(self, X):
        """First inputs for a batch of states, one-shot per row.

        Each row is treated as the start of a run: the controller weight
        is initialized from that state, no warm start carries over.
        """
        self._check_fitted()
        X = np.atleast_2d(as_float_matrix(X, "X"))
        cfg = self.config_
        theta = np.maximum(cfg.eps, cfg.nu * np.atleast_1d(cfg.gamma_of(X)))
        res = step_batch(cfg, X, theta)
        if res.fault.any():
            raise ValueError(f"{int(res.fault.sum())} state(s) admit no feasible solution")
        return res.u0

    def reset(self, x0):
        """Start a stateful closed loop from ``x0``."""
        self._check_fitted()
        self.state_ = init_theta(self.config_, x0)
        self._fresh = True
        return self

    def step(self, x):
        """One closed-loop decision; returns the input to apply at ``x``."""
        self._check_fitted()
        if self.state_ is None:
            raise ValueError("call reset(x0) before step()")
        if not self._fresh:
            self.state_ = update_theta(self.state_, self.config_, x)
        self._fresh = False
        solver = solve_enumerated if self.config_.formulation == "enumerated" else solve_two_stage
        u, diag = solver(self.config_, self.state_, x)
        if diag.fault:
            raise ValueError(f"controller fault at k={self.state_.k}")
        self.state_.last_solution = diag.solution
        self.last_diagnostics_ = diag
        return u

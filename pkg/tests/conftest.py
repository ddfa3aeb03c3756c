"""Shared fixtures: presets, tightening sequences, certificates, configs.

Certificates default to the reduced smoke grids so the suite stays
runnable on one core; set CONTRACTMPC_FULL_GRIDS=1 to certify on the full
published grids instead.
"""

import os

import numpy as np
import pytest

from contractmpc import (
    ControllerConfig,
    build_certificate,
    compute_tightening,
    get_preset,
    plant_from_config,
    stage_cost_bound,
)

FULL_GRIDS = os.environ.get("CONTRACTMPC_FULL_GRIDS", "") not in ("", "0")


def _grid(preset):
    return preset.grid_full if FULL_GRIDS else preset.grid_smoke


def nominal_clone(model):
    """Same plant with the disturbance box collapsed to zero."""
    return plant_from_config({
        "dynamics": model.name,
        "dist_box": {"lo": [0.0] * model.r, "hi": [0.0] * model.r},
    })


def make_config(preset, seq, cert=None, **overrides):
    model = overrides.pop("model", preset.model)
    l_bar = stage_cost_bound(preset.Q, preset.R, model.state_box,
                             model.input_box, model.x_ref, model.u_ref)
    kwargs = dict(model=model, Q=preset.Q, R=preset.R, l_bar=l_bar,
                  xi=preset.xi, nu=preset.nu, eps=preset.eps,
                  cert=cert if cert is not None else preset.reference_certificate,
                  seq=seq)
    kwargs.update(overrides)
    return ControllerConfig(**kwargs)


@pytest.fixture(scope="session")
def nh_preset():
    return get_preset("nonholonomic")


@pytest.fixture(scope="session")
def tank_preset():
    return get_preset("quadruple_tank")


@pytest.fixture(scope="session")
def toy_preset():
    return get_preset("deadbeat_toy")


@pytest.fixture(scope="session")
def nh_seq(nh_preset):
    return compute_tightening(nh_preset.model, nh_preset.n_max)


@pytest.fixture(scope="session")
def tank_seq(tank_preset):
    return compute_tightening(tank_preset.model, tank_preset.n_max)


@pytest.fixture(scope="session")
def toy_seq(toy_preset):
    return compute_tightening(toy_preset.model, toy_preset.n_max)


@pytest.fixture(scope="session")
def toy_cert(toy_preset, toy_seq):
    return build_certificate(toy_preset.model, toy_preset.P_gamma, toy_preset.rcis,
                             toy_seq, grid=_grid(toy_preset))


@pytest.fixture(scope="session")
def nh_cert(nh_preset, nh_seq):
    return build_certificate(nh_preset.model, nh_preset.P_gamma, nh_preset.rcis,
                             nh_seq, grid=_grid(nh_preset))


@pytest.fixture(scope="session")
def tank_cert(tank_preset, tank_seq):
    return build_certificate(tank_preset.model, tank_preset.P_gamma, tank_preset.rcis,
                             tank_seq, grid=_grid(tank_preset), pins=dict(tank_preset.pins))


@pytest.fixture(scope="session")
def nh_cfg(nh_preset, nh_seq):
    return make_config(nh_preset, nh_seq)


@pytest.fixture(scope="session")
def tank_cfg(tank_preset, tank_seq):
    return make_config(tank_preset, tank_seq)


@pytest.fixture(scope="session")
def toy_cfg(toy_preset, toy_seq):
    return make_config(toy_preset, toy_seq)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)

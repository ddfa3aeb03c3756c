"""Named benchmark scenarios, wired end to end.

Each preset bundles a plant, the contraction metric and invariant region
used with it, grid layouts for certification (a full profile and a
desk-scale smoke profile), controller weights, and the closed-loop
experiment definition.  A reference certificate built from the scenario's
published constants ships alongside, so the controller can be exercised
without re-running certification.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .boxes import Box, Ellipsoid
from .contraction import ContractionCertificate, GridSpec
from .plants import PlantModel, make_deadbeat_toy, make_nonholonomic, make_quadruple_tank

__all__ = ["Preset", "nonholonomic_preset", "quadruple_tank_preset", "deadbeat_preset",
           "get_preset", "PRESET_NAMES"]

TANK_P = np.array([
    [6.0794, -0.9107, 1.5580, -1.9296],
    [-0.9107, 4.9770, -2.1981, 1.0145],
    [1.5580, -2.1981, 4.1999, -1.0133],
    [-1.9296, 1.0145, -1.0133, 3.3115],
])
TANK_K = np.array([
    [-1.7914, -1.6219, 0.8432, -6.9335],
    [-2.2376, -2.5948, -6.7541, 0.6823],
])
TANK_KAPPA = 0.025
TANK_BETA = 0.124


@dataclass
class Preset:
    """Everything needed to reproduce one benchmark scenario."""

    name: str
    model: PlantModel
    n_max: int
    P_gamma: np.ndarray
    rcis: Union[Box, Ellipsoid]
    Q: np.ndarray
    R: np.ndarray
    x0: np.ndarray
    steps: int
    n_runs: int
    table_decimals: int
    grid_full: GridSpec
    grid_smoke: GridSpec
    nu: float = 0.99
    eps: float = 1e-8
    xi: object = "auto"
    pins: dict = field(default_factory=dict)
    reference_certificate: Optional[ContractionCertificate] = None
    terminal: Optional[dict] = None


def nonholonomic_preset():
    model = make_nonholonomic()
    P_gamma = np.diag([1.0, 0.167, 0.167])
    cert = ContractionCertificate(
        P_gamma=P_gamma, gamma=0.2487, N_p=10,
        omega=14.44, gamma_max_val=49.4, omega_bound=14.44 / 49.4,
        rcis=model.state_box, grid_spec=GridSpec(20),
        gamma_table={10: 0.2487},
    )
    return Preset(
        name="nonholonomic", model=model, n_max=10, P_gamma=P_gamma,
        rcis=model.state_box, Q=np.eye(3), R=0.01 * np.eye(2),
        x0=np.array([-4.0, 10.0, 4.0]), steps=30, n_runs=100,
        table_decimals=1, grid_full=GridSpec(20), grid_smoke=GridSpec(12),
        reference_certificate=cert,
    )


def quadruple_tank_preset():
    model = make_quadruple_tank()
    rcis = Ellipsoid(center=model.x_ref, shape=TANK_P, level=TANK_BETA)
    cert = ContractionCertificate(
        P_gamma=TANK_P, gamma=0.0079, N_p=17,
        omega=0.074, gamma_max_val=7.7408, omega_bound=0.074 / 7.7408,
        rcis=rcis, grid_spec=GridSpec(9),
        gamma_table={17: 0.0079},
    )
    return Preset(
        name="quadruple_tank", model=model, n_max=17, P_gamma=TANK_P,
        rcis=rcis, Q=np.eye(4), R=0.01 * np.eye(2),
        x0=np.array([1.3533, 1.1751, 1.2228, 0.8863]), steps=50, n_runs=100,
        table_decimals=4, grid_full=GridSpec(9), grid_smoke=GridSpec(5),
        pins={"omega": 0.074, "gamma_max": 7.7408},
        reference_certificate=cert,
        terminal={"P": TANK_P, "K": TANK_K, "kappa": TANK_KAPPA, "beta": TANK_BETA},
    )


def deadbeat_preset():
    model = make_deadbeat_toy()
    P_gamma = np.array([[1.0]])
    cert = ContractionCertificate(
        P_gamma=P_gamma, gamma=0.0, N_p=1,
        omega=1.99 ** 2, gamma_max_val=4.0, omega_bound=1.99 ** 2 / 4.0,
        rcis=model.state_box, grid_spec=GridSpec(21),
        gamma_table={1: 0.0},
    )
    return Preset(
        name="deadbeat_toy", model=model, n_max=5, P_gamma=P_gamma,
        rcis=model.state_box, Q=np.eye(1), R=np.eye(1),
        x0=np.array([1.5]), steps=10, n_runs=5,
        table_decimals=4, grid_full=GridSpec(21), grid_smoke=GridSpec(11),
        reference_certificate=cert,
    )


_PRESETS = {
    "nonholonomic": nonholonomic_preset,
    "quadruple_tank": quadruple_tank_preset,
    "deadbeat_toy": deadbeat_preset,
}
PRESET_NAMES = tuple(_PRESETS)


def get_preset(name):
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}") from None

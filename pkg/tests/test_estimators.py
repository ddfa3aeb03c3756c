"""Estimator front ends: parameter handling, fitting, prediction."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from contractmpc import (
    Box,
    ContractionCertificate,
    ContractionCertifier,
    ControllerConfig,
    GridSpec,
    PlantModel,
    RobustContractionMPC,
    save_certificate,
)


@pytest.fixture(scope="module")
def fitted_certifier():
    return ContractionCertifier(preset="deadbeat_toy", grid_points=7).fit()


@pytest.fixture(scope="module")
def fitted_mpc():
    return RobustContractionMPC(preset="deadbeat_toy", formulation="enumerated").fit()


def _runaway_pair():
    plant = PlantModel(
        name="runaway",
        n=1, m=1, r=1,
        f=lambda x, u, w: 2.0 * x + 0.1 * u + w,
        state_box=Box([-2.0], [2.0]),
        input_box=Box([-1.0], [1.0]),
        dist_box=Box([-0.01], [0.01]),
        x_ref=[0.0], u_ref=[0.0],
        L_x=[[2.0]], L_u=[[0.1]], L_w=[[1.0]],
    )
    cert = ContractionCertificate(
        P_gamma=np.eye(1), gamma=0.5, N_p=2,
        omega=2.0, gamma_max_val=4.0, omega_bound=0.5,
        rcis=plant.state_box, grid_spec=GridSpec(5),
        gamma_table={2: 0.5},
    )
    return plant, cert


# ---------------------------------------------------------------------------
# certifier
# ---------------------------------------------------------------------------

def test_certifier_stores_params_verbatim():
    est = ContractionCertifier(preset="deadbeat_toy", grid_points=7, seed=3)
    params = est.get_params()
    assert params["preset"] == "deadbeat_toy"
    assert params["grid_points"] == 7
    assert params["seed"] == 3
    assert params["plant"] is None
    twin = clone(est)
    assert twin.get_params() == params
    assert not hasattr(twin, "certificate_")


def test_certifier_requires_full_spec_without_preset():
    with pytest.raises(ValueError, match="without a preset"):
        ContractionCertifier().fit()


def test_certifier_fit_exposes_certificate(fitted_certifier):
    est = fitted_certifier
    assert isinstance(est.certificate_, ContractionCertificate)
    assert est.n_p_ == 1
    assert est.gamma_ == pytest.approx(0.0, abs=1e-9)
    assert est.omega_ == pytest.approx(1.99**2, abs=1e-9)
    assert est.tightening_.N_max == 5
    assert list(est.gamma_table_) == [1]


def test_certifier_transform_evaluates_metric(fitted_certifier):
    vals = fitted_certifier.transform([[1.0], [0.5], [0.0]])
    assert vals == pytest.approx([1.0, 0.25, 0.0])


def test_certifier_transform_requires_fit():
    with pytest.raises(NotFittedError):
        ContractionCertifier(preset="deadbeat_toy").transform([[1.0]])


def test_certifier_explicit_args_override_preset():
    est = ContractionCertifier(preset="deadbeat_toy", n_max=3, grid_points=5).fit()
    assert est.tightening_.N_max == 3
    assert est.n_p_ == 1


def test_certifier_forwards_pins():
    est = ContractionCertifier(preset="deadbeat_toy", grid_points=5,
                               pins={"omega": 2.0}).fit()
    assert est.omega_ == 2.0
    assert est.certificate_.computed["omega"] == pytest.approx(1.99**2, abs=1e-9)


# ---------------------------------------------------------------------------
# controller estimator
# ---------------------------------------------------------------------------

def test_mpc_stores_params_verbatim():
    est = RobustContractionMPC(preset="deadbeat_toy", formulation="enumerated", nu=0.9)
    params = est.get_params()
    assert params["formulation"] == "enumerated"
    assert params["nu"] == 0.9
    assert params["xi"] == "auto"
    twin = clone(est)
    assert twin.get_params() == params
    assert not hasattr(twin, "config_")


def test_mpc_requires_plant_and_certificate_without_preset():
    with pytest.raises(ValueError, match="plant and certificate are required"):
        RobustContractionMPC().fit()


def test_mpc_fit_resolves_weights(fitted_mpc):
    assert isinstance(fitted_mpc.config_, ControllerConfig)
    assert fitted_mpc.l_bar_ == pytest.approx(8.0)
    assert fitted_mpc.xi_ == pytest.approx(16.0)


def test_mpc_predict_batch(fitted_mpc):
    u = fitted_mpc.predict([[0.0], [1.0]])
    assert u.shape == (2, 1)
    assert u[0, 0] == pytest.approx(0.0, abs=1e-9)
    assert fitted_mpc.config_.model.input_box.contains(u).all()
    again = fitted_mpc.predict([[0.0], [1.0]])
    assert u.tobytes() == again.tobytes()


def test_mpc_predict_requires_fit():
    with pytest.raises(NotFittedError):
        RobustContractionMPC(preset="deadbeat_toy").predict([[0.0]])


def test_mpc_predict_reports_infeasible_states():
    plant, cert = _runaway_pair()
    est = RobustContractionMPC(plant=plant, certificate=cert, n_max=2).fit()
    with pytest.raises(ValueError, match="no feasible solution"):
        est.predict([[1.9]])


def test_mpc_step_requires_reset(fitted_mpc):
    est = clone(fitted_mpc).fit()
    with pytest.raises(ValueError, match="reset"):
        est.step([1.0])


def test_mpc_closed_loop_drives_to_target(fitted_mpc):
    est = clone(fitted_mpc).fit()
    model = est.config_.model
    x = np.array([1.5])
    est.reset(x)
    for k in range(6):
        u = est.step(x)
        assert model.input_box.contains(u)
        assert not est.last_diagnostics_.fault
        x = model.step_nominal(x, u)
    assert est.state_.k == 5
    assert abs(x[0]) < 1e-3


def test_mpc_preset_field_override():
    est = RobustContractionMPC(preset="deadbeat_toy", Q=2.0 * np.eye(1)).fit()
    assert est.config_.Q[0, 0] == 2.0
    # state vertex: 2 * 4; input vertex: 1 * 4
    assert est.l_bar_ == pytest.approx(12.0)
    assert est.xi_ == pytest.approx(24.0)


def test_mpc_loads_certificate_from_path(tmp_path, toy_cert, toy_preset):
    path = tmp_path / "cert.json"
    save_certificate(path, toy_cert)
    est = RobustContractionMPC(plant=toy_preset.model, certificate=str(path),
                               n_max=5).fit()
    assert est.config_.cert.N_p == 1
    assert est.config_.cert.omega == pytest.approx(toy_cert.omega)

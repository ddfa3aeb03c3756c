"""Certification pipeline: gamma estimation, horizon selection, assembly."""

import json
import logging

import numpy as np
import pytest

from contractmpc import (
    Box,
    ContractionCertificate,
    Ellipsoid,
    GridSpec,
    PlantModel,
    build_certificate,
    check_sublevel_containment,
    compute_tightening,
    default_grid,
    estimate_gamma,
    load_certificate,
    make_deadbeat_toy,
    make_nonholonomic,
    make_quadruple_tank,
    save_certificate,
    select_min_horizon,
)
from contractmpc.contraction import (
    audit_monotone,
    certificate_from_dict,
    certificate_to_dict,
)


def _expanding_plant():
    """Scalar plant x+ = 2x + 0.1u + w: the input authority is far too weak
    to fight the unstable drift, so no horizon can contract the quadratic."""
    return PlantModel(
        name="expanding",
        n=1, m=1, r=1,
        f=lambda x, u, w: 2.0 * x + 0.1 * u + w,
        state_box=Box([-2.0], [2.0]),
        input_box=Box([-1.0], [1.0]),
        dist_box=Box([-0.01], [0.01]),
        x_ref=[0.0], u_ref=[0.0],
        L_x=[[2.0]], L_u=[[0.1]], L_w=[[1.0]],
    )


def _toy_like_cert(**overrides):
    fields = dict(
        P_gamma=np.eye(1),
        gamma=0.5,
        N_p=2,
        omega=1.0,
        gamma_max_val=1.6,
        omega_bound=0.625,
        rcis=Box([-2.0], [2.0]),
        grid_spec=GridSpec(points_per_axis=5),
    )
    fields.update(overrides)
    return ContractionCertificate(**fields)


# ---------------------------------------------------------------------------
# grid construction
# ---------------------------------------------------------------------------

def test_gridspec_counts_scalar_and_per_axis():
    assert GridSpec(points_per_axis=5).counts(3) == (5, 5, 5)
    assert GridSpec(points_per_axis=(3, 4)).counts(2) == (3, 4)
    with pytest.raises(ValueError, match="length must match"):
        GridSpec(points_per_axis=(3, 4)).counts(3)


def test_gridspec_build_covers_box_endpoints():
    pts = GridSpec(points_per_axis=3).build(Box([-1.0, 0.0], [1.0, 2.0]))
    assert pts.shape == (9, 2)
    rows = {tuple(p) for p in pts}
    assert {(-1.0, 0.0), (1.0, 2.0), (0.0, 1.0), (-1.0, 2.0), (1.0, 0.0)} <= rows


def test_gridspec_build_mixed_counts():
    pts = GridSpec(points_per_axis=(2, 3)).build(Box([0.0, 0.0], [1.0, 1.0]))
    assert pts.shape == (6, 2)
    assert sorted(set(pts[:, 0])) == [0.0, 1.0]
    assert sorted(set(pts[:, 1])) == [0.0, 0.5, 1.0]


def test_default_grid_coarsens_above_three_states():
    assert default_grid(make_deadbeat_toy()).points_per_axis == 20
    assert default_grid(make_nonholonomic()).points_per_axis == 20
    assert default_grid(make_quadruple_tank()).points_per_axis == 9
    assert default_grid(make_deadbeat_toy(), seed=7).seed == 7


# ---------------------------------------------------------------------------
# certificate dataclass gates
# ---------------------------------------------------------------------------

def test_certificate_rejects_gamma_outside_unit_interval():
    with pytest.raises(ValueError, match=r"\[0,1\)"):
        _toy_like_cert(gamma=1.0)
    with pytest.raises(ValueError, match=r"\[0,1\)"):
        _toy_like_cert(gamma=-0.1)


def test_certificate_accepts_zero_gamma():
    # an exact one-step deadbeat reports a zero contraction ratio
    assert _toy_like_cert(gamma=0.0).gamma == 0.0


def test_certificate_rejects_nonpositive_omega():
    with pytest.raises(ValueError, match="omega must be positive"):
        _toy_like_cert(omega=0.0, omega_bound=0.0, gamma=0.0)


def test_certificate_rejects_gamma_above_bound():
    with pytest.raises(ValueError, match="exceeds the bound"):
        _toy_like_cert(gamma=0.7, omega_bound=0.625)


def test_certificate_gamma_fn_is_the_quadratic():
    cert = _toy_like_cert(P_gamma=np.diag([2.0]))
    x = np.array([[0.5], [-1.0], [0.0]])
    assert cert.gamma_fn(x, np.zeros(1)) == pytest.approx([0.5, 2.0, 0.0])


# ---------------------------------------------------------------------------
# gamma estimation and horizon selection
# ---------------------------------------------------------------------------

def test_estimate_gamma_deadbeat_contracts_in_one_step():
    model = make_deadbeat_toy()
    g = estimate_gamma(model, np.eye(1), 1, GridSpec(points_per_axis=7))
    assert g == pytest.approx(0.0, abs=1e-9)


def test_select_min_horizon_deadbeat():
    model = make_deadbeat_toy()
    n_p, gamma = select_min_horizon(model, np.eye(1), 5, 0.99, GridSpec(points_per_axis=7))
    assert n_p == 1
    assert gamma == pytest.approx(0.0, abs=1e-9)


def test_select_min_horizon_validates_bound():
    model = make_deadbeat_toy()
    for bad in (0.0, 1.0, -0.2, 1.3):
        with pytest.raises(ValueError, match=r"\(0,1\)"):
            select_min_horizon(model, np.eye(1), 3, bad, GridSpec(points_per_axis=5))


def test_expanding_plant_saturates_ratio_and_fails_selection(caplog):
    model = _expanding_plant()
    grid = GridSpec(points_per_axis=5)
    with caplog.at_level(logging.WARNING, logger="contractmpc.contraction"):
        g = estimate_gamma(model, np.eye(1), 1, grid)
    assert g == 1.0
    assert "failed to contract" in caplog.text
    with pytest.raises(ValueError, match="smaller state set"):
        select_min_horizon(model, np.eye(1), 3, 0.5, grid)


def test_audit_monotone_flags_rises_only():
    assert audit_monotone({1: 0.9, 2: 0.5, 3: 0.45}) == 0.0
    assert audit_monotone({1: 0.5, 2: 0.56, 3: 0.1}) == pytest.approx(0.06)


# ---------------------------------------------------------------------------
# sublevel containment margin
# ---------------------------------------------------------------------------

def test_containment_margin_positive_when_set_fits():
    margin = check_sublevel_containment(
        np.eye(2), np.zeros(2), 1.0, Box([-2.0, -2.0], [2.0, 2.0]),
        Box([-0.1, -0.1], [0.1, 0.1]), samples=4096,
    )
    # unit disk inflated by the 0.1-box against the +/-2 box: slack 0.9
    assert margin == pytest.approx(0.9, abs=5e-3)


def test_containment_margin_negative_when_set_leaks():
    margin = check_sublevel_containment(
        np.eye(2), np.zeros(2), 4.41, Box([-2.0, -2.0], [2.0, 2.0]),
        Box([-0.1, -0.1], [0.1, 0.1]), samples=4096,
    )
    assert -0.25 < margin < -0.15


def test_containment_margin_ellipsoidal_region():
    region = Ellipsoid(center=np.zeros(2), shape=np.eye(2), level=4.0)
    margin = check_sublevel_containment(
        np.eye(2), np.zeros(2), 1.0, region, Box([-0.1, -0.1], [0.1, 0.1]),
        samples=2048,
    )
    # worst case: a boundary point pushed radially by the diagonal vertex
    # of the disturbance box, radius 1 + 0.1*sqrt(2)
    assert margin == pytest.approx(4.0 - (1.0 + 0.1 * np.sqrt(2.0)) ** 2, abs=1e-4)


# ---------------------------------------------------------------------------
# full assembly on the deadbeat toy
# ---------------------------------------------------------------------------

def test_toy_certificate_values(toy_cert):
    assert toy_cert.N_p == 1
    assert toy_cert.gamma == pytest.approx(0.0, abs=1e-9)
    # state box +/-2 shrunk by R(1) = 0.01 leaves +/-1.99
    assert toy_cert.omega == pytest.approx(1.99**2, abs=1e-9)
    assert toy_cert.gamma_max_val == pytest.approx(4.0, abs=1e-12)
    assert toy_cert.omega_bound == pytest.approx(1.99**2 / 4.0, rel=1e-12)
    assert isinstance(toy_cert.rcis, Box)
    assert toy_cert.computed == {}
    assert sorted(toy_cert.gamma_table) == [1]


def test_build_certificate_rejects_degenerate_regions():
    model = make_deadbeat_toy()
    seq = compute_tightening(model, 3)
    with pytest.raises(ValueError, match="condition 3"):
        build_certificate(model, np.eye(1), Box([1.0], [1.99]), seq,
                          grid=GridSpec(points_per_axis=5))
    with pytest.raises(ValueError, match="centered at the target"):
        build_certificate(
            model, np.eye(1),
            Ellipsoid(center=np.array([0.5]), shape=np.eye(1), level=1.0),
            seq, grid=GridSpec(points_per_axis=5),
        )
    with pytest.raises(ValueError, match="Box or an Ellipsoid"):
        build_certificate(model, np.eye(1), object(), seq,
                          grid=GridSpec(points_per_axis=5))


def test_build_certificate_pin_gate():
    model = make_deadbeat_toy()
    seq = compute_tightening(model, 3)
    rcis = Box(model.state_box.lo, model.state_box.hi)
    grid = GridSpec(points_per_axis=7)
    with pytest.raises(ValueError, match="exceeds the computed value"):
        build_certificate(model, np.eye(1), rcis, seq, grid=grid,
                          pins={"omega": 5.0})
    cert = build_certificate(model, np.eye(1), rcis, seq, grid=grid,
                             pins={"omega": 2.0})
    assert cert.omega == 2.0
    assert cert.computed["omega"] == pytest.approx(1.99**2, abs=1e-9)
    assert cert.N_p == 1


# ---------------------------------------------------------------------------
# the two benchmark certificates (session-scoped smoke grids)
# ---------------------------------------------------------------------------

def test_nonholonomic_certificate(nh_cert):
    assert nh_cert.omega == pytest.approx(14.44, abs=1e-9)
    assert nh_cert.gamma_max_val == pytest.approx(49.4, abs=1e-9)
    assert nh_cert.omega_bound == pytest.approx(14.44 / 49.4, rel=1e-12)
    assert nh_cert.N_p == 10
    assert nh_cert.gamma < nh_cert.omega_bound
    assert nh_cert.gamma == pytest.approx(0.2487, abs=0.05)
    assert sorted(nh_cert.gamma_table) == list(range(1, 11))
    # longer horizons should not make the worst ratio meaningfully worse
    assert audit_monotone(nh_cert.gamma_table) <= 2e-2
    assert nh_cert.gamma_table[1] > nh_cert.gamma_table[10]
    assert nh_cert.computed == {}


def test_quadruple_tank_certificate(tank_cert):
    # both constants are pinned to their published values; the exact grid
    # computation lands elsewhere and is kept under `computed`
    assert tank_cert.omega == 0.074
    assert tank_cert.gamma_max_val == 7.7408
    assert tank_cert.omega_bound == pytest.approx(0.074 / 7.7408, rel=1e-12)
    assert tank_cert.N_p == 17
    assert tank_cert.gamma <= 0.0096
    assert tank_cert.gamma == pytest.approx(0.0079, abs=0.005)
    assert tank_cert.computed["omega"] == pytest.approx(0.0906, abs=2e-3)
    assert tank_cert.computed["omega"] > tank_cert.omega
    assert tank_cert.computed["gamma_max"] == pytest.approx(12.5264, abs=1e-2)
    assert tank_cert.computed["gamma_max"] > tank_cert.gamma_max_val


def test_certificate_agrees_with_its_own_table(nh_cert):
    assert nh_cert.gamma == nh_cert.gamma_table[nh_cert.N_p]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_certificate_json_round_trip(tmp_path, toy_cert):
    path = tmp_path / "toy_cert.json"
    save_certificate(path, toy_cert)
    back = load_certificate(path)
    assert back.P_gamma.tobytes() == toy_cert.P_gamma.tobytes()
    assert back.gamma == toy_cert.gamma
    assert back.N_p == toy_cert.N_p
    assert back.omega == toy_cert.omega
    assert back.gamma_max_val == toy_cert.gamma_max_val
    assert back.omega_bound == toy_cert.omega_bound
    assert back.gamma_table == toy_cert.gamma_table  # int keys restored
    assert isinstance(back.rcis, Box)
    assert np.array_equal(back.rcis.lo, toy_cert.rcis.lo)
    assert np.array_equal(back.rcis.hi, toy_cert.rcis.hi)
    assert back.grid_spec == toy_cert.grid_spec


def test_certificate_dict_round_trip_ellipsoid_region():
    cert = _toy_like_cert(
        P_gamma=np.eye(2),
        rcis=Ellipsoid(center=np.zeros(2), shape=np.diag([1.0, 2.0]), level=3.0),
        grid_spec=GridSpec(points_per_axis=(3, 4), seed=11),
        gamma_table={1: 0.8, 2: 0.5},
        computed={"omega": 1.25},
    )
    # push through actual JSON text so key stringification is exercised
    back = certificate_from_dict(json.loads(json.dumps(certificate_to_dict(cert))))
    assert isinstance(back.rcis, Ellipsoid)
    assert np.array_equal(back.rcis.shape, cert.rcis.shape)
    assert back.rcis.level == cert.rcis.level
    assert back.grid_spec == GridSpec(points_per_axis=(3, 4), seed=11)
    assert back.gamma_table == {1: 0.8, 2: 0.5}
    assert back.computed == {"omega": 1.25}


def test_rcis_dict_unknown_type_rejected():
    from contractmpc.contraction import _rcis_from_dict

    with pytest.raises(ValueError, match="unknown region type"):
        _rcis_from_dict({"type": "polytope"})

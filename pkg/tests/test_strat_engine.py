import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qstrat.errors import AxiomViolationError, ConfigurationError, InstanceError
from qstrat.frequency import Disk
from qstrat.minkowski import tubular_volume_estimate
from qstrat.qfield import linear_field
from qstrat.strat_engine import (
    Calibration,
    Instance,
    bad_scales,
    broken_instance,
    calibrate_empirical,
    capture,
    count_m,
    countability_audit,
    derive_parameters,
    dist_to_affine,
    field_instance,
    geometric_scales,
    iterative_cover,
    plane_instance,
    proof_tau,
    smallest_q,
    stability_check,
    stability_delta0,
    strata_membership,
    strata_points,
    verify_hypotheses,
)

ORIGIN = np.zeros(2)
CALIB = Calibration(eta1=0.1, lambda1=0.3, eta2=0.05)


@pytest.fixture(scope="module")
def branch_inst(branch65):
    return field_instance(branch65, 0.2, Disk((0.0, 0.0), 1.0))


def _practical(**kw):
    args = dict(n=2, kappa0=0.5, delta=0.1, r0=0.2, lambda0=2.0, mode="practical", tau=0.1)
    args.update(kw)
    return derive_parameters(**args)


def synthetic(theta, lambda0=1.0, n=2, dk=None):
    return Instance(n=n, m_max=n, theta=theta, dk=dk or (lambda x, s, k: float(k)), lambda0=lambda0,
                    points=np.zeros((1, n)), in_u=lambda x: True,
                    subspace=lambda x, s, k: np.eye(n)[:, :k])


# ------------------------------------------------------------ parameters

def test_proof_tau():
    tau = proof_tau(2, 0.5)
    assert tau == pytest.approx((1 / (400 * math.pi)) ** 4, rel=1e-12)
    assert math.pi * tau**0.25 <= 20.0**-2


def test_m_and_p0_example():
    p = derive_parameters(2, 0.5, 0.1, 1.0, 1.0, Calibration(0.1, 0.3, 0.05), mode="practical", tau=0.5)
    assert (p.q, p.M, p.p0) == (2, 20, 23)


def test_proof_mode_needs_calibration():
    with pytest.raises(ConfigurationError):
        derive_parameters(2, 0.5, 0.1, 1.0, 1.0)
    p = derive_parameters(2, 0.5, 0.1, 1.0, 1.0, CALIB)
    assert p.tau == proof_tau(2, 0.5) and p.waived == ()
    with pytest.raises(ConfigurationError):
        derive_parameters(2, 0.5, 0.1, 1.0, 1.0, CALIB, tau=0.1)


def test_practical_mode_records_the_waiver():
    p = _practical()
    assert p.tau == 0.1 and p.mode == "practical"
    assert p.waived == ("omega_n tau^(kappa0/2) <= 20^-n",)
    assert p.calibration_source == "default"
    assert p.to_dict()["waived"] == list(p.waived)


@pytest.mark.parametrize("kw", [dict(kappa0=1.0), dict(delta=0.0), dict(r0=0.0), dict(tau=1.5), dict(mode="fast")])
def test_parameter_validation(kw):
    with pytest.raises(ValueError):
        _practical(**kw)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.floats(0.1, 0.9), st.integers(0, 2), st.integers(1, 500), st.integers(1, 100))
def test_parameter_invariants(n, kappa0, k, lam_milli, eta_cent):
    lambda0 = lam_milli / 100
    eta1 = eta_cent / 400
    calib = Calibration(eta1=eta1, lambda1=0.3, eta2=lambda s0, eps, tau: eps / 3)
    p = derive_parameters(n, kappa0, 0.2, 0.5, lambda0, calib, mode="practical", tau=0.25, k=k)
    assert p.tau**p.q <= p.lambda1 < p.tau ** (p.q - 1) or p.q == 1
    assert p.M == (p.q * Fraction(lam_milli, 100)) // Fraction(eta_cent, 400)
    assert p.p0 == p.q + p.M + 1
    assert list(p.gamma_chain) == sorted(p.gamma_chain) and p.gamma_chain[-1] == 0.2
    assert len(p.gamma_chain) == k + 1


def test_smallest_q_and_count_m():
    assert smallest_q(0.1, 0.2) == 1
    assert smallest_q(0.5, 0.3) == 2
    assert smallest_q(0.5, 0.25) == 2
    assert count_m(2, 1.0, 0.1) == 20
    assert count_m(3, 0.3, 0.1) == 9


# ------------------------------------------------------------ good scales

def test_cone_point_has_no_bad_scales(branch_inst):
    assert bad_scales(branch_inst, ORIGIN, _practical(lambda0=branch_inst.lambda0)) == []


def test_constant_theta_has_no_bad_scales():
    assert bad_scales(synthetic(lambda x, s: 0.5), ORIGIN, _practical(lambda0=1.0)) == []


def test_single_jump():
    params = _practical(lambda0=1.0)
    jump_at = 4 * params.radius(5)
    inst = synthetic(lambda x, s: 1.0 if s >= jump_at else 0.0)
    assert params.q == 1
    bad = bad_scales(inst, ORIGIN, params)
    assert bad == [5]
    assert len(bad) <= math.floor(1.0 / params.eta1)


def test_increasing_theta_is_an_axiom_violation():
    with pytest.raises(AxiomViolationError):
        bad_scales(synthetic(lambda x, s: -s), ORIGIN, _practical(lambda0=1.0))


def test_too_many_bad_scales_is_an_instance_error():
    params = _practical(lambda0=0.3)  # M = 3
    inst = synthetic(lambda x, s: max(0.0, 10 + 0.2 * math.log10(s)), lambda0=0.3)
    with pytest.raises(InstanceError):
        bad_scales(inst, ORIGIN, params)


# ----------------------------------------------------------------- strata

def test_branch_point_is_in_the_top_stratum(branch_inst):
    r = branch_inst.meta["r_min"]
    yes = strata_membership(branch_inst, ORIGIN, 0, r, 0.2, 0.5)
    assert yes
    # d_1 = sqrt(2) up to the energy overshoot of the coarse grid near the branch node
    assert all(v == pytest.approx(math.sqrt(2), rel=0.05) for v in yes.values)
    assert not strata_membership(branch_inst, ORIGIN, 0, r, 0.2, 1.5)
    away = strata_membership(branch_inst, (0.25, 0.0), 0, r, 0.2, 0.5)
    assert not away and "not in U" in away.reason


def test_scale_grid_is_checked(branch_inst):
    with pytest.raises(ValueError):
        strata_membership(branch_inst, ORIGIN, 0, 0.05, 0.2, 0.5, scale_grid=[0.05, 0.2])
    assert len(geometric_scales(0.05, 0.2)) == 3
    with pytest.raises(ValueError):
        geometric_scales(0.3, 0.2)


def _graded(n=2):
    pts = np.random.default_rng(4).uniform(-1, 1, (40, n))
    inst = synthetic(lambda x, s: 1.0, dk=lambda x, s, k: k * (0.1 + np.linalg.norm(x)) * (1 + s), n=n)
    inst.points = pts
    return inst


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1), st.integers(0, 1), st.floats(0.01, 0.1), st.floats(0.01, 0.1),
       st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_strata_are_nested(k, dk_, r, dr, delta, ddelta):
    inst = _graded()
    k2, r2, delta2 = min(k + dk_, 1), min(r + dr, 0.5), delta * ddelta
    small = {tuple(p) for p in strata_points(inst, k, r, 0.5, delta)}
    big = {tuple(p) for p in strata_points(inst, k2, r2, 0.5, delta2)}
    assert small <= big


# ---------------------------------------------------------------- capture

def test_capture_at_the_branch_point(branch_inst):
    res = capture(branch_inst, ORIGIN, 0.05, 0, 0.5, 0.1, 0.1)
    assert res.applicable and res.V.shape == (2, 0)
    assert res.audit_ok
    assert len(res.captured) >= 1
    assert np.all(np.linalg.norm(res.captured, axis=1) < 0.1 * 0.05)


def test_capture_is_not_applicable_without_singular_points(grid65):
    inst = field_instance(linear_field([[1.0, 0.0]], grid65), 0.2, Disk((0.0, 0.0), 1.0))
    assert inst.meta["singular_points"] == []
    assert not capture(inst, ORIGIN, 0.05, 0, 0.5, 0.1, 0.1).applicable


def test_capture_k_range(branch_inst):
    with pytest.raises(ValueError):
        capture(branch_inst, ORIGIN, 0.05, 2, 0.5, 0.1, 0.1)


def test_dist_to_affine():
    V = np.array([[1.0], [0.0]])
    assert np.allclose(dist_to_affine([[3.0, 4.0], [0.0, -1.0]], [0.0, 1.0], V), [3.0, 2.0])


# --------------------------------------------------------------- covering

def test_cover_of_a_single_point(branch_inst):
    params = _practical(lambda0=branch_inst.lambda0)
    rep = iterative_cover(branch_inst, [[0.0, 0.0]], params)
    assert rep.ok
    assert [lv.cardinality for lv in rep.levels] == [1] * len(rep.levels)
    assert all(lv.case == "b" for lv in rep.levels[1:])
    assert rep.final_bound == pytest.approx(math.pi * params.radius(params.p0) ** 2)
    r = np.array([lv.radius for lv in rep.levels])
    b = np.array([lv.tubular_bound for lv in rep.levels])
    assert np.allclose(b / r**2, math.pi)


def test_empty_cover():
    rep = iterative_cover(plane_instance(2, 1), np.zeros((0, 2)), _practical())
    assert rep.levels == [] and rep.final_bound == 0.0 and rep.ok


@pytest.mark.parametrize("n,k", [(2, 1), (3, 1), (3, 2), (2, 0)])
def test_plane_covers_pass_their_audits(n, k):
    inst = plane_instance(n, k)
    params = _practical(n=n, k=k, lambda0=1.0)
    rep = iterative_cover(inst, inst.points, params, p=params.q + 3)
    assert rep.ok, [a for a in rep.audits if not a["ok"]]


@pytest.mark.parametrize("k", [0, 1])
def test_cover_levels_dominate_measured_tubes(k):
    inst = plane_instance(2, k, count=200)
    params = _practical(k=k, lambda0=1.0, tau=0.5)
    rep = iterative_cover(inst, inst.points, params, p=params.q + 4)
    assert rep.ok
    for lv in rep.levels:
        est = tubular_volume_estimate(inst.points, lv.radius / 5)
        assert lv.tubular_bound >= est.volume - est.error


def test_case_a_levels():
    inst = plane_instance(2, 1)
    params = _practical(k=1, lambda0=1.0)
    q = params.q
    rep = iterative_cover(inst, inst.points, params, A=[q, q + 1], p=q + 3)
    assert [lv.case for lv in rep.levels] == ["start", "a", "a", "b"]
    assert rep.ok


def test_bad_set_outside_range():
    with pytest.raises(ValueError):
        iterative_cover(plane_instance(2, 1), np.zeros((1, 2)), _practical(), A=[0])
    with pytest.raises(ValueError):
        iterative_cover(plane_instance(2, 1), np.zeros((1, 2)), _practical(k=2))


def test_tubular_bound_slope_on_a_segment():
    inst = plane_instance(2, 1, count=400)
    params = _practical(k=1, lambda0=1.0, tau=0.25)
    rep = iterative_cover(inst, inst.points, params, p=params.q + 4)
    r = np.array([lv.radius for lv in rep.levels])
    b = np.array([lv.tubular_bound for lv in rep.levels])
    slope = np.polyfit(np.log(r), np.log(b), 1)[0]
    assert slope >= 2 - 1 - 0.5 - 0.1


# ------------------------------------------------------------ hypotheses

def test_branch_instance_is_consistent(branch_inst):
    pairs = [(ORIGIN, s) for s in (0.05, 0.1, 0.2)]
    calib = calibrate_empirical(branch_inst, pairs, 0.1, 0.5, 0.1)
    assert calib.source == "empirical" and calib.get_eta1(0, 0) > 0
    rep = verify_hypotheses(branch_inst, pairs, 0.1, 0.5, 0.1, calib)
    assert rep.consistent and rep.checked == 3


def test_broken_instance_is_caught():
    from qstrat.strat_engine import DEFAULT_CALIBRATION
    rep = verify_hypotheses(broken_instance(), [(ORIGIN, 0.1), (ORIGIN, 0.2)], 0.1, 0.5, 0.1, DEFAULT_CALIBRATION)
    assert not rep.consistent
    assert {c["hypothesis"] for c in rep.counterexamples} == {"i"}


def test_empty_sample():
    rep = verify_hypotheses(broken_instance(), [], 0.1, 0.5, 0.1, CALIB)
    assert rep.consistent and rep.checked == 0


# -------------------------------------------------------------- stability

def test_delta0_formula():
    assert stability_delta0(16.0) == pytest.approx(17**-0.5, rel=1e-15)
    with pytest.raises(ValueError):
        stability_delta0(-1.0)


def test_stability_on_the_branch_instance(branch_inst):
    assert stability_check(branch_inst, [0.05, 0.1, 0.2], 0.2)
    assert stability_check(branch_inst, [], 0.2)
    with pytest.raises(ValueError):
        stability_check(branch_inst, [0.99], 0.2)


def test_countability():
    params = _practical()
    assert countability_audit([[0.0, 0.0]], params)
    assert not countability_audit([[0.1, 0.2], [0.1, 0.2]], params)
    pts = np.random.default_rng(2).uniform(-1, 1, (30, 2))
    assert countability_audit(pts, params, synthetic(lambda x, s: 1.0), last=5)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terradyn import vehicle_model as vm

import oracles


def _state(**kw):
    return vm.VehicleState(**kw)


def _random_case(rng):
    p = vm.ParamSet(
        D_R=-rng.uniform(2000, 6000), C_R=rng.uniform(1.0, 2.0), B_R=rng.uniform(2, 8),
        D_F=-rng.uniform(2000, 6000), C_F=rng.uniform(1.0, 2.0), B_F=rng.uniform(2, 8),
        L_R=rng.uniform(1, 2), L_F=rng.uniform(1, 2), C_max=rng.uniform(0.1, 1.0),
        C_L=rng.uniform(2, 4), C_r=rng.uniform(2, 6), C_r_d=rng.uniform(2, 6),
        C_x_d=rng.uniform(0, 0.05), C_y_d=rng.uniform(0, 0.05),
        C_x_g=rng.uniform(-12, -8), C_y_g=rng.uniform(-12, -8), m=rng.uniform(800, 2500),
        rpm_c0=rng.uniform(0, 1), rpm_c1=rng.uniform(0, 5e-4), rpm_c2=-rng.uniform(0, 1e-7),
        th_c0=rng.uniform(0, 100), th_c1=rng.uniform(1000, 3000), th_c2=rng.uniform(0, 1000),
        br_c0=rng.uniform(0, 100), br_c1=rng.uniform(1000, 4000), br_c2=rng.uniform(0, 1000),
        rr_scale=rng.uniform(100, 800), rr_slope=rng.uniform(0.5, 2),
    )
    s = _state(p_x=rng.normal(0, 50), p_y=rng.normal(0, 50), phi=rng.uniform(-math.pi, math.pi),
               v_x=rng.uniform(-1, 12), v_y=rng.normal(0, 1), r=rng.normal(0, 0.5))
    a = vm.ActuatorState(rng.uniform(0, 1), rng.uniform(-0.5, 0.5), rng.normal(0, 1), rng.uniform(0, 4000))
    u = vm.ControlInput(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(-0.5, 0.5))
    n = rng.normal(0, 0.2, 3)
    n[2] = 1.0
    eta = vm.SurfaceNormal.from_vector(n)
    return p, s, a, u, eta


def _oracle(p, s, a, u, eta):
    pd = {k: float(v) for k, v in p.as_dict().items()}
    s = vm.VehicleState(*(float(v) for v in s))
    a = vm.ActuatorState(*(float(v) for v in a))
    u = vm.ControlInput(*(float(v) for v in u))
    eta = vm.SurfaceNormal(*(float(v) for v in eta))
    F = oracles.forces(pd, s.v_x, s.v_y, s.r, a.steer_angle, a.engine_rpm, a.brake_pressure,
                       u.throttle, eta.eta_z)
    d = oracles.derivatives(pd, s.phi, s.v_x, s.v_y, s.r, F, a.steer_angle, (eta.eta_x, eta.eta_y, eta.eta_z))
    return F, d


def test_forces_and_derivatives_match_high_precision_transcription():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        p, s, a, u, eta = _random_case(rng)
        f = vm.compute_forces(s, a, u, eta, p)
        d = vm.body_derivatives(s, f, a.steer_angle, eta, p)
        F_ref, d_ref = _oracle(p, s, a, u, eta)
        for got, ref in zip(list(f) + list(d), list(F_ref) + list(d_ref)):
            ref = float(ref)
            worst = max(worst, abs(got - ref) / max(1.0, abs(ref)))
    assert worst < 1e-12


@pytest.mark.parametrize("v_y,r,v_x,delta,expected", [
    (0.0, 0.0, 5.0, 0.0, (0.0, 0.0)),
    (0.0, 0.0, 5.0, 0.1, (0.0, -0.1)),
    (1.0, 0.5, 3.0, 0.0, (math.atan(0.25 / 3), math.atan(1.75 / 3))),
])
def test_slip_angle_examples(v_y, r, v_x, delta, expected):
    p = vm.ParamSet(C_max=0.1)
    a_r, a_f = vm.compute_slip_angles(_state(v_x=v_x, v_y=v_y, r=r), delta, p)
    assert a_r == pytest.approx(expected[0], abs=1e-15)
    assert a_f == pytest.approx(expected[1], abs=1e-15)


def test_slip_angles_continuous_across_floor():
    p = vm.ParamSet(C_max=0.5)
    below = vm.compute_slip_angles(_state(v_x=0.5 - 1e-9, v_y=0.3, r=0.1), 0.0, p)
    above = vm.compute_slip_angles(_state(v_x=0.5 + 1e-9, v_y=0.3, r=0.1), 0.0, p)
    assert np.allclose(below, above, atol=1e-8)


def test_zero_inputs_give_zero_lateral_and_yaw_forces():
    p = vm.ParamSet(rpm_c0=0.0, th_c0=0.0, br_c0=0.0)
    f = vm.compute_forces(_state(), vm.ActuatorState(0.0, 0.0, 0.0, 0.0), vm.ControlInput(0.0, 0.0, 0.0),
                          vm.SurfaceNormal.flat(), p)
    assert (f.F_yf, f.F_yb, f.F_r) == (0.0, 0.0, 0.0)


def test_forces_linear_in_eta_z():
    rng = np.random.default_rng(3)
    p, s, a, u, _ = _random_case(rng)
    tilt = math.sqrt(1 - 0.25)
    f1 = vm.compute_forces(s, a, u, vm.SurfaceNormal(tilt, 0.0, 0.5), p)
    f2 = vm.compute_forces(s, a, u, vm.SurfaceNormal(0.0, 0.0, 1.0), p)
    for x, y in zip(list(f1)[:3], list(f2)[:3]):
        assert x == pytest.approx(0.5 * y, rel=1e-14, abs=1e-12)
    assert f1.F_r == f2.F_r


@settings(max_examples=200, deadline=None)
@given(alpha_vy=st.floats(-50, 50), r=st.floats(-5, 5), v_x=st.floats(-5, 30), delta=st.floats(-0.5, 0.5))
def test_lateral_force_saturation_and_symmetry(alpha_vy, r, v_x, delta):
    p = vm.ParamSet()
    a = vm.ActuatorState(0.0, delta, 0.0, 1000.0)
    u = vm.ControlInput(0.5, 0.0, delta)
    eta = vm.SurfaceNormal.flat()
    f = vm.compute_forces(_state(v_x=v_x, v_y=alpha_vy, r=r), a, u, eta, p)
    assert abs(f.F_yf) <= abs(p.D_F) and abs(f.F_yb) <= abs(p.D_R)
    g = vm.compute_forces(_state(v_x=v_x, v_y=-alpha_vy, r=-r), a.replace(steer_angle=-delta), u, eta, p)
    assert g.F_yf == pytest.approx(-f.F_yf, abs=1e-9)
    assert g.F_yb == pytest.approx(-f.F_yb, abs=1e-9)


def test_derivative_examples():
    p = vm.ParamSet(C_x_d=0.0, C_y_d=0.0)
    zero = vm.ForceVector(0.0, 0.0, 0.0, 0.0)
    flat = vm.SurfaceNormal.flat()
    d = vm.body_derivatives(_state(), zero, 0.0, flat, p)
    assert list(d) == [0.0] * 6
    d = vm.body_derivatives(_state(v_x=2.0), zero, 0.0, flat, p)
    assert (d.p_x, d.p_y) == (2.0, 0.0)
    d = vm.body_derivatives(_state(phi=math.pi / 2, v_x=2.0), zero, 0.0, flat, p)
    assert d.p_x == pytest.approx(0.0, abs=1e-15) and d.p_y == pytest.approx(2.0)


def test_euler_examples():
    s = _state(p_x=1.0, p_y=2.0, phi=0.3, v_x=4.0)
    zero = vm.StateDerivative(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    assert vm.euler_step(s, zero) == s
    moved = vm.euler_step(_state(), vm.StateDerivative(2.0, 0.0, 0.0, 0.0, 0.0, 0.0), 0.02)
    assert (moved.p_x, moved.p_y) == (pytest.approx(0.04), 0.0)
    wrapped = vm.euler_step(_state(phi=math.pi - 0.01), vm.StateDerivative(0, 0, 1.0, 0, 0, 0), 0.02)
    assert wrapped.phi == pytest.approx(-math.pi + 0.01, abs=1e-12)
    with pytest.raises(ValueError):
        vm.euler_step(s, zero, 0.0)


@settings(max_examples=200, deadline=None)
@given(phi=st.floats(-100, 100), rate=st.floats(-50, 50))
def test_yaw_stays_wrapped(phi, rate):
    out = vm.euler_step(_state(phi=phi), vm.StateDerivative(0, 0, rate, 0, 0, 0), 0.02)
    assert -math.pi < out.phi <= math.pi


def test_integration_is_deterministic_and_finite():
    rng = np.random.default_rng(5)
    p, s, a, u, eta = _random_case(rng)

    def run():
        x, act = s, a
        for _ in range(200):
            f = vm.compute_forces(x, act, u, eta, p)
            x = vm.euler_step(x, vm.body_derivatives(x, f, act.steer_angle, eta, p))
            act = vm.step_actuators(act, u, x.v_x, p)
        return x
    first, second = run(), run()
    assert first == second
    assert all(math.isfinite(v) for v in first)


# --- actuators ---------------------------------------------------------------------------------

def test_actuator_fixed_points():
    p = vm.ParamSet()
    a = vm.ActuatorState(0.4, 0.2, 0.0, 1200.0)
    nxt = vm.step_actuators(a, vm.ControlInput(0.0, 0.4, 0.2), 3.0, p)
    assert nxt.brake_pressure == pytest.approx(0.4, abs=1e-15)
    assert nxt.steer_angle == pytest.approx(0.2, abs=1e-15)
    assert nxt.steer_rate == 0.0


def test_brake_step_response_after_three_time_constants():
    p = vm.ParamSet(brake_tau=0.2)
    a = vm.ActuatorState(0.0, 0.0, 0.0, 0.0)
    for _ in range(int(round(3 * 0.2 / vm.DT))):
        a = vm.step_actuators(a, vm.ControlInput(0.0, 1.0, 0.0), 0.0, p)
    assert 0.94 <= a.brake_pressure <= 0.96
    assert a.brake_pressure == pytest.approx(1 - math.exp(-3), abs=1e-12)


def test_actuator_ranges_hold():
    p = vm.ParamSet()
    a = vm.ActuatorState(0.0, 0.0, 0.0, 900.0)
    rng = np.random.default_rng(2)
    for _ in range(500):
        u = vm.ControlInput(*rng.uniform([-1, -1, -2], [2, 2, 2]))
        a = vm.step_actuators(a, u, rng.uniform(-2, 10), p)
        assert 0.0 <= a.brake_pressure <= 1.0
        assert abs(a.steer_angle) <= p.steer_max
        assert a.engine_rpm >= 0.0


def test_control_input_clamps():
    u = vm.ControlInput(1.5, -0.2, 3.0)
    assert (u.throttle, u.brake_cmd, u.steer_cmd) == (1.0, 0.0, vm.MAX_STEER)


def test_actuator_fit_recovers_constants():
    true = vm.ParamSet(brake_tau=0.22, steer_wn=9.0, steer_zeta=0.7, rpm_tau=0.4, rpm_idle=800.0,
                       rpm_per_throttle=1800.0, rpm_per_speed=200.0)
    rng = np.random.default_rng(0)
    a = vm.ActuatorState(0.0, 0.0, 0.0, 900.0)
    acts, ctrls, speeds = [], [], []
    u = vm.ControlInput(0.3, 0.0, 0.0)
    for k in range(3000):
        if k % 40 == 0:
            u = vm.ControlInput(rng.uniform(0, 1), rng.uniform(0, 1) * (rng.uniform() < 0.3),
                                rng.uniform(-0.3, 0.3))
        v = 5 + 3 * math.sin(k * 0.01)
        acts.append(list(a))
        ctrls.append(list(u))
        speeds.append(v)
        a = vm.step_actuators(a, u, v, true)
    fit = vm.fit_actuator_models(np.array(acts), np.array(ctrls), np.array(speeds), vm.ParamSet())
    for key in vm.ParamSet.ACTUATOR_KEYS:
        if key == "steer_max":
            continue
        assert getattr(fit, key) == pytest.approx(getattr(true, key), rel=1e-6), key


# --- value types -------------------------------------------------------------------------------

def test_surface_normal_validation():
    with pytest.raises(ValueError):
        vm.SurfaceNormal(0.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        vm.SurfaceNormal(0.0, 0.0, -1.0)
    n = vm.SurfaceNormal.from_vector([0.1, -0.2, 1.0])
    assert math.isclose(n.eta_x ** 2 + n.eta_y ** 2 + n.eta_z ** 2, 1.0, rel_tol=1e-12)


@pytest.mark.parametrize("key", ["C_max", "m", "L_R", "L_F"])
def test_paramset_rejects_nonpositive(key):
    with pytest.raises(ValueError):
        vm.ParamSet(**{key: 0.0})


def test_paramset_rejects_nonfinite():
    with pytest.raises(ValueError):
        vm.ParamSet(D_R=float("nan"))


def test_paramset_text_round_trip_is_bit_exact():
    rng = np.random.default_rng(9)
    p, *_ = _random_case(rng)
    q = vm.ParamSet.from_text(p.to_text())
    assert all(getattr(p, k) == getattr(q, k) for k in vm.ParamSet.keys())
    assert q.to_text() == p.to_text()


def test_paramset_text_rejects_unknown_key():
    with pytest.raises(ValueError):
        vm.ParamSet.from_text("bogus = 1.0\n")

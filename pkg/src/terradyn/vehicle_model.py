"""Parametric bicycle model with actuator delay states.

Every function here is written against :mod:`terradyn.nn.autograd`, so the
fields of the state/parameter containers may be Python floats, numpy
arrays (a batch of vehicles), or taped tensors (training).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

import numpy as np

from .nn import autograd as ag

DT = 0.02
MAX_STEER = 0.5

STATE_FIELDS = ("p_x", "p_y", "phi", "v_x", "v_y", "r")
ACTUATOR_FIELDS = ("brake_pressure", "steer_angle", "steer_rate", "engine_rpm")
CONTROL_FIELDS = ("throttle", "brake_cmd", "steer_cmd")


class _Fields:
    """Tuple-like helpers shared by the small state containers."""

    def __iter__(self):
        return iter(getattr(self, f.name) for f in fields(self))

    def as_array(self):
        """Stack fields along the last axis (plain values only)."""
        return np.stack([np.asarray(ag.value_of(v), dtype=np.float64) for v in self], axis=-1)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        return cls(*(arr[..., i] for i in range(len(fields(cls)))))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class VehicleState(_Fields):
    """Inertial position (m), yaw (rad), body velocities (m/s), yaw rate (rad/s)."""

    p_x: float = 0.0
    p_y: float = 0.0
    phi: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    r: float = 0.0


@dataclass(frozen=True)
class StateDerivative(_Fields):
    """Time derivative of each :class:`VehicleState` field."""

    p_x: float = 0.0
    p_y: float = 0.0
    phi: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    r: float = 0.0


@dataclass(frozen=True)
class ActuatorState(_Fields):
    brake_pressure: float = 0.0
    steer_angle: float = 0.0
    steer_rate: float = 0.0
    engine_rpm: float = 0.0


@dataclass(frozen=True)
class ControlInput(_Fields):
    """Commanded throttle and brake in [0, 1] and steering in rad; clamped on construction."""

    throttle: float = 0.0
    brake_cmd: float = 0.0
    steer_cmd: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "throttle", ag.clip(self.throttle, 0.0, 1.0))
        object.__setattr__(self, "brake_cmd", ag.clip(self.brake_cmd, 0.0, 1.0))
        object.__setattr__(self, "steer_cmd", ag.clip(self.steer_cmd, -MAX_STEER, MAX_STEER))


@dataclass(frozen=True)
class ForceVector(_Fields):
    F_x: float = 0.0
    F_yf: float = 0.0
    F_yb: float = 0.0
    F_r: float = 0.0


@dataclass(frozen=True)
class SurfaceNormal(_Fields):
    """Unit ground normal expressed in the body frame."""

    eta_x: float = 0.0
    eta_y: float = 0.0
    eta_z: float = 1.0

    def __post_init__(self):
        if any(ag.is_tensor(v) for v in self):
            return
        norm = np.sqrt(np.square(self.eta_x) + np.square(self.eta_y) + np.square(self.eta_z))
        if not np.all(np.abs(norm - 1.0) <= 1e-6):
            raise ValueError("surface normal must have unit length")
        if not np.all(np.asarray(self.eta_z) > 0):
            raise ValueError("surface normal must face upward (eta_z > 0)")

    @classmethod
    def flat(cls):
        return cls(0.0, 0.0, 1.0)

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float64)
        vec = vec / np.linalg.norm(vec, axis=-1, keepdims=True)
        return cls(vec[..., 0], vec[..., 1], vec[..., 2])


@dataclass(frozen=True)
class ParamSet:
    """All constants of the parametric model.

    Lateral stiffness constants carry the sign that makes the tire forces
    restoring under the slip-angle convention used here, hence negative D.
    """

    # rear / front Pacejka
    D_R: float = -4000.0
    C_R: float = 1.5
    B_R: float = 5.0
    D_F: float = -4000.0
    C_F: float = 1.5
    B_F: float = 5.0
    # geometry and slip floor
    L_R: float = 1.5
    L_F: float = 1.5
    C_max: float = 0.5
    # yaw
    C_L: float = 3.0
    C_r: float = 4.0
    C_r_d: float = 4.0
    # drag and gravity
    C_x_d: float = 0.01
    C_y_d: float = 0.02
    C_x_g: float = -9.81
    C_y_g: float = -9.81
    m: float = 1500.0
    # P(x_rpm), P(u_th), P(x_br): c0 + c1 x + c2 x^2
    rpm_c0: float = 0.6
    rpm_c1: float = 2e-4
    rpm_c2: float = -3e-8
    th_c0: float = 0.0
    th_c1: float = 2200.0
    th_c2: float = 800.0
    br_c0: float = 0.0
    br_c1: float = 3000.0
    br_c2: float = 1000.0
    # beta(v_x) = rr_scale * tanh(rr_slope * v_x)
    rr_scale: float = 450.0
    rr_slope: float = 1.0
    # actuator delay models
    brake_tau: float = 0.15
    steer_wn: float = 12.0
    steer_zeta: float = 0.9
    steer_max: float = MAX_STEER
    rpm_tau: float = 0.3
    rpm_idle: float = 900.0
    rpm_per_throttle: float = 1500.0
    rpm_per_speed: float = 250.0

    ACTUATOR_KEYS = ("brake_tau", "steer_wn", "steer_zeta", "steer_max",
                     "rpm_tau", "rpm_idle", "rpm_per_throttle", "rpm_per_speed")

    def __post_init__(self):
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        if any(ag.is_tensor(v) or np.ndim(v) for v in vals.values()):
            return  # batched or differentiable views are not validated
        for key, val in vals.items():
            if not math.isfinite(val):
                raise ValueError(f"parameter {key} is not finite")
        for key in ("C_max", "m", "L_R", "L_F", "brake_tau", "rpm_tau", "steer_wn", "steer_max"):
            if not vals[key] > 0:
                raise ValueError(f"parameter {key} must be positive")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def terradynamic_keys(cls):
        return [k for k in cls.keys() if k not in cls.ACTUATOR_KEYS]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        return {k: getattr(self, k) for k in self.keys()}

    def to_text(self):
        """Human-readable ``key = value`` lines; floats use repr so parsing is exact."""
        return "".join(f"{k} = {float(v)!r}\n" for k, v in self.as_dict().items())

    @classmethod
    def from_text(cls, text):
        known = set(cls.keys())
        vals = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ValueError(f"line {lineno}: cannot parse {line!r}")
            vals[key] = float(val.strip())
        return cls(**vals)


# --- terradynamics -----------------------------------------------------------

def _poly(c0, c1, c2, x):
    return c0 + c1 * x + c2 * x * x


def compute_slip_angles(state, steer_angle, params):
    """Rear and front slip angles ``(alpha_R, alpha_F)``."""
    denom = ag.maximum(params.C_max, state.v_x)
    alpha_r = ag.arctan((state.v_y - params.L_R * state.r) / denom)
    alpha_f = ag.arctan((state.v_y + params.L_F * state.r) / denom) - steer_angle
    return alpha_r, alpha_f


def rolling_resistance(v_x, params):
    return params.rr_scale * ag.tanh(params.rr_slope * v_x)


def compute_forces(state, actuators, control, normal, params):
    p = params
    delta = actuators.steer_angle
    alpha_r, alpha_f = compute_slip_angles(state, delta, p)
    drive = (_poly(p.rpm_c0, p.rpm_c1, p.rpm_c2, actuators.engine_rpm)
             * _poly(p.th_c0, p.th_c1, p.th_c2, control.throttle))
    brake = _poly(p.br_c0, p.br_c1, p.br_c2, actuators.brake_pressure)
    f_x = (drive - brake - rolling_resistance(state.v_x, p)) * normal.eta_z
    f_yb = p.D_R * ag.sin(p.C_R * ag.tanh(p.B_R * alpha_r)) * normal.eta_z
    f_yf = p.D_F * ag.sin(p.C_F * ag.tanh(p.B_F * alpha_f)) * normal.eta_z
    f_r = (state.v_x / p.C_L) * delta * p.C_r - p.C_r_d * state.r
    return ForceVector(f_x, f_yf, f_yb, f_r)


def body_derivatives(state, forces, steer_angle, normal, params):
    p = params
    cd, sd = ag.cos(steer_angle), ag.sin(steer_angle)
    dv_x = (((1.0 + cd) * forces.F_x - forces.F_yf * sd) / p.m
            - p.C_x_d * state.v_x * state.v_x - p.C_x_g * normal.eta_x + state.v_y * state.r)
    dv_y = ((forces.F_yb + cd * forces.F_yf + forces.F_x * sd) / p.m
            - p.C_y_d * state.v_y * state.v_y - p.C_y_g * normal.eta_y - state.v_x * state.r)
    cphi, sphi = ag.cos(state.phi), ag.sin(state.phi)
    dp_x = cphi * state.v_x - sphi * state.v_y
    dp_y = sphi * state.v_x + cphi * state.v_y
    return StateDerivative(dp_x, dp_y, state.r, dv_x, dv_y, forces.F_r)


def euler_step(state, derivative, dt=DT):
    if not dt > 0:
        raise ValueError("dt must be positive")
    return VehicleState(
        state.p_x + dt * derivative.p_x,
        state.p_y + dt * derivative.p_y,
        ag.wrap_angle(state.phi + dt * derivative.phi),
        state.v_x + dt * derivative.v_x,
        state.v_y + dt * derivative.v_y,
        state.r + dt * derivative.r,
    )


# --- actuators ---------------------------------------------------------------

def rpm_target(throttle, v_x, params):
    p = params
    return ag.maximum(p.rpm_idle + p.rpm_per_throttle * throttle + p.rpm_per_speed * v_x, 0.0)


def step_actuators(actuators, control, v_x, params, dt=DT):
    """Advance the delay models by ``dt``.

    Brake pressure and RPM follow exact first-order lags; steering is a
    damped second-order tracker integrated semi-implicitly and clamped to
    the mechanical limit.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    p = params
    a_br = math.exp(-dt / float(ag.value_of(p.brake_tau)))
    brake = control.brake_cmd + (actuators.brake_pressure - control.brake_cmd) * a_br
    wn, zeta = p.steer_wn, p.steer_zeta
    accel = wn * wn * (control.steer_cmd - actuators.steer_angle) - 2.0 * zeta * wn * actuators.steer_rate
    rate = actuators.steer_rate + dt * accel
    angle = ag.clip(actuators.steer_angle + dt * rate, -float(p.steer_max), float(p.steer_max))
    a_rpm = math.exp(-dt / float(ag.value_of(p.rpm_tau)))
    target = rpm_target(control.throttle, v_x, p)
    rpm = target + (actuators.engine_rpm - target) * a_rpm
    return ActuatorState(ag.clip(brake, 0.0, 1.0), angle, rate, ag.maximum(rpm, 0.0))


def fit_actuator_models(actuators, controls, v_x, params, dt=DT, transitions=None):
    """Least-squares fit of the delay constants from logged sequences.

    ``actuators`` is (T, 4), ``controls`` is (T, 3), ``v_x`` is (T,).
    ``transitions`` optionally masks which of the T - 1 row pairs to use.
    Returns ``params`` with the actuator keys replaced.
    """
    act = np.asarray(actuators, dtype=np.float64)
    u = np.asarray(controls, dtype=np.float64)
    v = np.asarray(v_x, dtype=np.float64)
    cur, nxt, cmd, v = act[:-1], act[1:], u[:-1], v[:-1]
    if transitions is not None:
        keep = np.asarray(transitions, dtype=bool)
        cur, nxt, cmd, v = cur[keep], nxt[keep], cmd[keep], v[keep]
    # brake: next - cmd = a (cur - cmd)
    x = cur[:, 0] - cmd[:, 1]
    y = nxt[:, 0] - cmd[:, 1]
    a_br = float(x @ y / max(x @ x, 1e-12))
    brake_tau = -dt / math.log(min(max(a_br, 1e-9), 1 - 1e-12))
    # steering: (rate' - rate)/dt = wn^2 (cmd - angle) - 2 zeta wn rate
    unclipped = np.abs(nxt[:, 1]) < float(params.steer_max) - 1e-9
    design = np.column_stack([cmd[:, 2] - cur[:, 1], -cur[:, 2]])[unclipped]
    target = ((nxt[:, 2] - cur[:, 2]) / dt)[unclipped]
    (wn2, two_zeta_wn), *_ = np.linalg.lstsq(design, target, rcond=None)
    wn = math.sqrt(max(wn2, 1e-9))
    # rpm: next = a cur + (1 - a)(idle + k_th u + k_v v)
    design = np.column_stack([cur[:, 3], np.ones(len(cur)), cmd[:, 0], v])
    coef, *_ = np.linalg.lstsq(design, nxt[:, 3], rcond=None)
    a_rpm = float(coef[0])
    gain = 1.0 - a_rpm
    return params.replace(
        brake_tau=brake_tau,
        steer_wn=wn,
        steer_zeta=float(two_zeta_wn) / (2.0 * wn),
        rpm_tau=-dt / math.log(min(max(a_rpm, 1e-9), 1 - 1e-12)),
        rpm_idle=float(coef[1] / gain),
        rpm_per_throttle=float(coef[2] / gain),
        rpm_per_speed=float(coef[3] / gain),
    )


# --- packed, hand-differentiated step ------------------------------------------------
#
# Training rolls the model out for hundreds of steps, and taping every scalar
# operation above costs far more in bookkeeping than in arithmetic. The two
# functions below compute the same quantities on packed arrays as single
# recorded ops: rows of ``x`` are (p_x, p_y, phi, v_x, v_y, r, brake_pressure,
# steer_angle, steer_rate, engine_rpm), ``u`` holds controls, ``eta`` body
# normals and ``pvec`` every ParamSet value in ``ParamSet.keys()`` order.

PACKED_FIELDS = STATE_FIELDS + ACTUATOR_FIELDS
PARAM_INDEX = {k: i for i, k in enumerate(ParamSet.keys())}


def param_vector(params):
    return np.array([float(v) for v in params.as_dict().values()], dtype=np.float64)


def _pv(p, *keys):
    return [p[..., PARAM_INDEX[k]] for k in keys]


def packed_forces(x, u, eta, pvec):
    """Parametric forces (B, 4) for packed states; equal to :func:`compute_forces`."""
    X, U, E, p = ag.value_of(x), np.asarray(u), np.asarray(eta), ag.value_of(pvec)
    (D_R, C_R, B_R, D_F, C_F, B_F, L_R, L_F, C_max, C_L, C_r, C_r_d, rpm_c0, rpm_c1, rpm_c2,
     th_c0, th_c1, th_c2, br_c0, br_c1, br_c2, rr_scale, rr_slope) = _pv(
        p, "D_R", "C_R", "B_R", "D_F", "C_F", "B_F", "L_R", "L_F", "C_max", "C_L", "C_r", "C_r_d",
        "rpm_c0", "rpm_c1", "rpm_c2", "th_c0", "th_c1", "th_c2", "br_c0", "br_c1", "br_c2",
        "rr_scale", "rr_slope")
    v_x, v_y, r = X[:, 3], X[:, 4], X[:, 5]
    br, delta, rpm = X[:, 6], X[:, 7], X[:, 9]
    th = np.clip(U[:, 0], 0.0, 1.0)
    ez = E[:, 2]
    pick_c = C_max >= v_x
    den = np.where(pick_c, C_max, v_x)
    qr = (v_y - L_R * r) / den
    qf = (v_y + L_F * r) / den
    a_r = np.arctan(qr)
    a_f = np.arctan(qf) - delta
    p_rpm = rpm_c0 + rpm_c1 * rpm + rpm_c2 * rpm * rpm
    p_th = th_c0 + th_c1 * th + th_c2 * th * th
    p_br = br_c0 + br_c1 * br + br_c2 * br * br
    t_rr = np.tanh(rr_slope * v_x)
    long = p_rpm * p_th - p_br - rr_scale * t_rr
    t_r = np.tanh(B_R * a_r)
    t_f = np.tanh(B_F * a_f)
    s_r, s_f = np.sin(C_R * t_r), np.sin(C_F * t_f)
    F = np.stack([long * ez, D_F * s_f * ez, D_R * s_r * ez,
                  (v_x / C_L) * delta * C_r - C_r_d * r], axis=-1)
    if not (ag.is_tensor(x) or ag.is_tensor(pvec)):
        return F

    def vjp(g):
        gx_, gyf, gyb, gr = g[:, 0], g[:, 1], g[:, 2], g[:, 3]
        gl = gx_ * ez
        # lateral chains: F = D sin(C tanh(B a)) ez
        c_r = np.cos(C_R * t_r)
        c_f = np.cos(C_F * t_f)
        g_sr = gyb * D_R * ez
        g_sf = gyf * D_F * ez
        g_tr = g_sr * c_r * C_R
        g_tf = g_sf * c_f * C_F
        g_ar = g_tr * (1 - t_r * t_r) * B_R
        g_af = g_tf * (1 - t_f * t_f) * B_F
        g_qr = g_ar / (1 + qr * qr)
        g_qf = g_af / (1 + qf * qf)
        g_den = -(g_qr * qr + g_qf * qf) / den
        gX = np.zeros_like(X)
        gX[:, 3] = (gl * (-rr_scale * rr_slope * (1 - t_rr * t_rr)) + gr * delta * C_r / C_L
                    + np.where(pick_c, 0.0, g_den))
        gX[:, 4] = (g_qr + g_qf) / den
        gX[:, 5] = (-g_qr * L_R + g_qf * L_F) / den - gr * C_r_d
        gX[:, 6] = -gl * (br_c1 + 2 * br_c2 * br)
        gX[:, 7] = -g_af + gr * v_x * C_r / C_L
        gX[:, 9] = gl * p_th * (rpm_c1 + 2 * rpm_c2 * rpm)
        gp = np.zeros((len(X), len(PARAM_INDEX)))
        cols = {
            "D_R": gyb * s_r * ez, "C_R": g_sr * c_r * t_r, "B_R": g_tr * (1 - t_r * t_r) * a_r,
            "D_F": gyf * s_f * ez, "C_F": g_sf * c_f * t_f, "B_F": g_tf * (1 - t_f * t_f) * a_f,
            "L_R": -g_qr * r / den, "L_F": g_qf * r / den, "C_max": np.where(pick_c, g_den, 0.0),
            "C_L": -gr * v_x * delta * C_r / (C_L * C_L), "C_r": gr * v_x * delta / C_L, "C_r_d": -gr * r,
            "rpm_c0": gl * p_th, "rpm_c1": gl * p_th * rpm, "rpm_c2": gl * p_th * rpm * rpm,
            "th_c0": gl * p_rpm, "th_c1": gl * p_rpm * th, "th_c2": gl * p_rpm * th * th,
            "br_c0": -gl, "br_c1": -gl * br, "br_c2": -gl * br * br,
            "rr_scale": -gl * t_rr, "rr_slope": -gl * rr_scale * (1 - t_rr * t_rr) * v_x,
        }
        for k, v in cols.items():
            gp[:, PARAM_INDEX[k]] = v
        return gX, _sum_to(gp, np.shape(p))
    return ag.custom_op(F, (x, pvec), vjp)


def packed_advance(x, forces, u, eta, pvec, dt=DT):
    """Next packed state from total forces (B, 4); equal to derivatives, Euler and actuators.

    Gradients flow to ``x``, ``forces`` and the body-dynamics constants;
    the actuator delay constants are treated as fixed.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    X, F, U, E, p = ag.value_of(x), ag.value_of(forces), np.asarray(u), np.asarray(eta), ag.value_of(pvec)
    m, C_x_d, C_y_d, C_x_g, C_y_g = _pv(p, "m", "C_x_d", "C_y_d", "C_x_g", "C_y_g")
    pn = p if p.ndim == 1 else p[0]
    brake_tau, wn, zeta, smax, rpm_tau, idle, rpt, rps = (float(pn[PARAM_INDEX[k]]) for k in (
        "brake_tau", "steer_wn", "steer_zeta", "steer_max", "rpm_tau", "rpm_idle",
        "rpm_per_throttle", "rpm_per_speed"))
    phi, v_x, v_y, r = X[:, 2], X[:, 3], X[:, 4], X[:, 5]
    br, st, sr, rpm = X[:, 6], X[:, 7], X[:, 8], X[:, 9]
    th = np.clip(U[:, 0], 0.0, 1.0)
    bc = np.clip(U[:, 1], 0.0, 1.0)
    sc = np.clip(U[:, 2], -MAX_STEER, MAX_STEER)
    Fx, Fyf, Fyb, Fr = F[:, 0], F[:, 1], F[:, 2], F[:, 3]
    cd, sd = np.cos(st), np.sin(st)
    cphi, sphi = np.cos(phi), np.sin(phi)
    dvx = ((1 + cd) * Fx - Fyf * sd) / m - C_x_d * v_x * v_x - C_x_g * E[:, 0] + v_y * r
    dvy = (Fyb + cd * Fyf + Fx * sd) / m - C_y_d * v_y * v_y - C_y_g * E[:, 1] - v_x * r
    out = np.empty_like(X)
    out[:, 0] = X[:, 0] + dt * (cphi * v_x - sphi * v_y)
    out[:, 1] = X[:, 1] + dt * (sphi * v_x + cphi * v_y)
    out[:, 2] = ag.wrap_angle(phi + dt * r)
    out[:, 3] = v_x + dt * dvx
    out[:, 4] = v_y + dt * dvy
    out[:, 5] = r + dt * Fr
    a_br = math.exp(-dt / brake_tau)
    b_raw = bc + (br - bc) * a_br
    out[:, 6] = np.clip(b_raw, 0.0, 1.0)
    rate = sr + dt * (wn * wn * (sc - st) - 2.0 * zeta * wn * sr)
    ang = st + dt * rate
    out[:, 7] = np.clip(ang, -smax, smax)
    out[:, 8] = rate
    a_rpm = math.exp(-dt / rpm_tau)
    t_raw = idle + rpt * th + rps * v_x
    t_on = t_raw >= 0.0
    target = np.where(t_on, t_raw, 0.0)
    rpm_raw = target + (rpm - target) * a_rpm
    r_on = rpm_raw >= 0.0
    out[:, 9] = np.where(r_on, rpm_raw, 0.0)
    if not (ag.is_tensor(x) or ag.is_tensor(forces) or ag.is_tensor(pvec)):
        return out

    def vjp(g):
        gvx_d, gvy_d = g[:, 3] * dt, g[:, 4] * dt
        gX = np.zeros_like(X)
        gX[:, 0] = g[:, 0]
        gX[:, 1] = g[:, 1]
        gX[:, 2] = dt * (g[:, 0] * (-sphi * v_x - cphi * v_y) + g[:, 1] * (cphi * v_x - sphi * v_y)) + g[:, 2]
        g_rpm = np.where(r_on, g[:, 9], 0.0)
        gX[:, 3] = (g[:, 3] + gvx_d * (-2 * C_x_d * v_x) - gvy_d * r
                    + dt * (g[:, 0] * cphi + g[:, 1] * sphi)
                    + np.where(t_on, g_rpm * (1 - a_rpm) * rps, 0.0))
        gX[:, 4] = (g[:, 4] + gvx_d * r + gvy_d * (-2 * C_y_d * v_y)
                    + dt * (-g[:, 0] * sphi + g[:, 1] * cphi))
        gX[:, 5] = g[:, 5] + dt * g[:, 2] + gvx_d * v_y - gvy_d * v_x
        gX[:, 6] = np.where((b_raw >= 0.0) & (b_raw <= 1.0), g[:, 6], 0.0) * a_br
        g_ang = np.where((ang >= -smax) & (ang <= smax), g[:, 7], 0.0)
        g_rate = g[:, 8] + g_ang * dt
        gX[:, 7] = (g_ang + g_rate * dt * (-wn * wn)
                    + gvx_d * (-sd * Fx - Fyf * cd) / m + gvy_d * (-sd * Fyf + Fx * cd) / m)
        gX[:, 8] = g_rate * (1.0 - dt * 2.0 * zeta * wn)
        gX[:, 9] = g_rpm * a_rpm
        gF = np.stack([(gvx_d * (1 + cd) + gvy_d * sd) / m,
                       (-gvx_d * sd + gvy_d * cd) / m,
                       gvy_d / m,
                       g[:, 5] * dt], axis=-1)
        gp = np.zeros((len(X), len(PARAM_INDEX)))
        gp[:, PARAM_INDEX["m"]] = -(gvx_d * ((1 + cd) * Fx - Fyf * sd) + gvy_d * (Fyb + cd * Fyf + Fx * sd)) / (m * m)
        gp[:, PARAM_INDEX["C_x_d"]] = -gvx_d * v_x * v_x
        gp[:, PARAM_INDEX["C_y_d"]] = -gvy_d * v_y * v_y
        gp[:, PARAM_INDEX["C_x_g"]] = -gvx_d * E[:, 0]
        gp[:, PARAM_INDEX["C_y_g"]] = -gvy_d * E[:, 1]
        return gX, gF, _sum_to(gp, np.shape(p))
    return ag.custom_op(out, (x, forces, pvec), vjp)


def _sum_to(g, shape):
    return g if g.shape == tuple(shape) else g.sum(axis=0)

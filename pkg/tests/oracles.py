"""Independent reference implementations used as test oracles.

These are written directly from the model equations with scalar mpmath
arithmetic and share no code with the package.
"""
import mpmath as mp

mp.mp.dps = 40


def slip_angles(v_x, v_y, r, delta, L_R, L_F, C_max):
    denom = mp.mpf(v_x) if v_x > C_max else mp.mpf(C_max)
    a_r = mp.atan((mp.mpf(v_y) - mp.mpf(L_R) * r) / denom)
    a_f = mp.atan((mp.mpf(v_y) + mp.mpf(L_F) * r) / denom) - delta
    return a_r, a_f


def forces(p, v_x, v_y, r, delta, rpm, brake, throttle, eta_z):
    """Longitudinal, front lateral, rear lateral and yaw-rate terms of the force vector."""
    a_r, a_f = slip_angles(v_x, v_y, r, delta, p["L_R"], p["L_F"], p["C_max"])
    P_rpm = mp.mpf(p["rpm_c0"]) + mp.mpf(p["rpm_c1"]) * rpm + mp.mpf(p["rpm_c2"]) * mp.mpf(rpm) ** 2
    P_th = mp.mpf(p["th_c0"]) + mp.mpf(p["th_c1"]) * throttle + mp.mpf(p["th_c2"]) * mp.mpf(throttle) ** 2
    P_br = mp.mpf(p["br_c0"]) + mp.mpf(p["br_c1"]) * brake + mp.mpf(p["br_c2"]) * mp.mpf(brake) ** 2
    beta = mp.mpf(p["rr_scale"]) * mp.tanh(mp.mpf(p["rr_slope"]) * v_x)
    F_x = (P_rpm * P_th - P_br - beta) * eta_z
    F_yb = mp.mpf(p["D_R"]) * mp.sin(mp.mpf(p["C_R"]) * mp.tanh(mp.mpf(p["B_R"]) * a_r)) * eta_z
    F_yf = mp.mpf(p["D_F"]) * mp.sin(mp.mpf(p["C_F"]) * mp.tanh(mp.mpf(p["B_F"]) * a_f)) * eta_z
    F_r = (mp.mpf(v_x) / p["C_L"]) * delta * p["C_r"] - mp.mpf(p["C_r_d"]) * r
    return F_x, F_yf, F_yb, F_r


def derivatives(p, phi, v_x, v_y, r, F, delta, eta):
    F_x, F_yf, F_yb, F_r = F
    eta_x, eta_y, _ = eta
    m = mp.mpf(p["m"])
    dvx = (((1 + mp.cos(delta)) * F_x - F_yf * mp.sin(delta)) / m
           - p["C_x_d"] * mp.mpf(v_x) ** 2 - p["C_x_g"] * mp.mpf(eta_x) + mp.mpf(v_y) * r)
    dvy = ((F_yb + mp.cos(delta) * F_yf + F_x * mp.sin(delta)) / m
           - p["C_y_d"] * mp.mpf(v_y) ** 2 - p["C_y_g"] * mp.mpf(eta_y) - mp.mpf(v_x) * r)
    dpx = mp.cos(phi) * v_x - mp.sin(phi) * v_y
    dpy = mp.sin(phi) * v_x + mp.cos(phi) * v_y
    return dpx, dpy, mp.mpf(r), dvx, dvy, F_r


def matvec(W, x):
    """Naive matrix-vector product over nested lists."""
    return [sum(W[i][j] * x[j] for j in range(len(x))) for i in range(len(W))]


def adam_constant_gradient(g, lr, eps, steps):
    """Closed-form Adam trajectory under a constant gradient from zero.

    Bias correction makes the corrected moments exactly g and g^2, so
    every step moves by lr * g / (|g| + eps).
    """
    step = lr * g / (abs(g) + eps)
    return [-(t + 1) * step for t in range(steps)]

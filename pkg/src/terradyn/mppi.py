"""Sampling-based model predictive control (MPPI) on top of the hybrid model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import vehicle_model as vm
from .hybrid import encode_map
from .world import (average_normal, to_body_frame, true_dynamics_step, wheel_offsets,
                    wheel_positions, world_feature_map)

CONTROL_LOW = np.array([0.0, 0.0, -vm.MAX_STEER])
CONTROL_HIGH = np.array([1.0, 1.0, vm.MAX_STEER])


@dataclass
class PlannerConfig:
    n_samples: int = 256
    horizon_s: float = 5.0
    dt: float = vm.DT
    noise_scale: tuple = (0.25, 0.1, 0.15)   # throttle, brake, steer
    temperature: float = 1.0
    w_goal: float = 1.0          # squared distance to goal at the horizon end
    w_path: float = 0.5          # distance to goal integrated over the horizon
    w_invalid: float = 20.0      # per second spent on invalid or unmapped cells
    w_effort: float = 0.05       # squared controls integrated over the horizon
    seed: int = 0
    replan_every: int = 5
    goal_tolerance: float = 2.0
    nominal_speed: float = 5.0
    map_size: float = 80.0
    map_recenter: float = 15.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        steps = self.horizon_s / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("horizon must be a whole number of steps")
        self.noise_scale = tuple(float(v) for v in self.noise_scale)

    @property
    def horizon_steps(self):
        return int(round(self.horizon_s / self.dt))


@dataclass
class PlanResult:
    controls: np.ndarray       # (H, 3) updated nominal sequence
    trajectory: np.ndarray     # (H, 6) rollout of the updated sequence
    samples: np.ndarray        # (N, H, 6) sampled rollouts
    costs: np.ndarray          # (N,)
    weights: np.ndarray        # (N,)

    @property
    def weighted_cost(self):
        return float(self.weights @ self.costs)


def sample_noise(cfg, iteration, n_steps):
    """Per-sample noise; sample ``i`` depends only on (seed, iteration, i). Sample 0 is zero."""
    scale = np.asarray(cfg.noise_scale)
    eps = np.empty((cfg.n_samples, n_steps, 3))
    for i in range(cfg.n_samples):
        eps[i] = np.random.default_rng([cfg.seed, iteration, i]).standard_normal((n_steps, 3)) * scale
    eps[0] = 0.0
    return eps


def softmax_weights(costs, temperature):
    z = -(np.asarray(costs, dtype=np.float64) - np.min(costs)) / temperature
    w = np.exp(z)
    return w / w.sum()


def trajectory_costs(states, controls, goal, tmap, cfg):
    """Cost of each rollout (N, H, 6) under controls (N, H, 3)."""
    goal = np.asarray(goal, dtype=np.float64)
    d = np.hypot(states[..., 0] - goal[0], states[..., 1] - goal[1])
    cost = cfg.w_goal * d[:, -1] ** 2 + cfg.w_path * d.sum(axis=1) * cfg.dt
    if tmap is not None:
        invalid = tmap.query(states[..., :2]).validity < 0
        cost = cost + cfg.w_invalid * invalid.sum(axis=1) * cfg.dt
    cost = cost + cfg.w_effort * np.sum(controls ** 2, axis=(1, 2)) * cfg.dt
    return cost


def plan(model, tmap, state, actuators, nominal, goal, cfg, iteration=0, history=None):
    """One MPPI iteration around the nominal control sequence (H, 3).

    ``tmap`` should be prepared with :func:`terradyn.hybrid.encode_map` for
    feature models (raw maps are encoded on the fly, which is slower).
    """
    nominal = np.asarray(nominal, dtype=np.float64)
    n_steps = nominal.shape[0]
    eps = sample_noise(cfg, iteration, n_steps)
    samples = np.clip(nominal + eps, CONTROL_LOW, CONTROL_HIGH)
    x0 = np.repeat(np.asarray(state, dtype=np.float64)[None], cfg.n_samples, axis=0)
    a0 = np.repeat(np.asarray(actuators, dtype=np.float64)[None], cfg.n_samples, axis=0)
    hist = None if history is None else np.repeat(np.asarray(history)[None], cfg.n_samples, axis=0)
    rolled = model.rollout(x0, a0, samples, tmap, history=hist)
    costs = trajectory_costs(rolled, samples, goal, tmap, cfg)
    w = softmax_weights(costs, cfg.temperature)
    updated = nominal + np.tensordot(w, samples - nominal, axes=1)
    hist1 = None if history is None else np.asarray(history)[None]
    best = model.rollout(np.asarray(state)[None], np.asarray(actuators)[None], updated[None], tmap,
                         history=hist1)[0]
    return PlanResult(updated, best, rolled, costs, w)


# --- closed loop ---------------------------------------------------------------------------

@dataclass
class DriveResult:
    states: np.ndarray
    actuators: np.ndarray
    controls: np.ndarray
    reached: bool
    steps: int
    time_to_goal: float | None
    tracking_errors: list = field(default_factory=list)
    planned: list = field(default_factory=list)

    @property
    def tracking_error(self):
        """Mean distance between planned and executed positions over executed segments."""
        return float(np.mean(self.tracking_errors)) if self.tracking_errors else 0.0


def receding_horizon_drive(model, terrain, goal, steps, cfg=None, basis=None, start=None,
                           start_actuators=None, bucket="hindsight", feature_seed=0):
    """Drive the true simulator toward ``goal``, replanning every ``cfg.replan_every`` steps.

    The planning map is rasterized from the world around the vehicle and
    re-centered once the vehicle moves ``cfg.map_recenter`` meters from
    its center.
    """
    cfg = cfg or PlannerConfig()
    goal = np.asarray(goal, dtype=np.float64)
    x = np.asarray(start if start is not None else [0.0, 0.0, 0.0, 0.0, 0.0, 0.0], dtype=np.float64)
    a = np.asarray(start_actuators if start_actuators is not None
                   else [0.0, 0.0, 0.0, float(terrain.params.rpm_idle)], dtype=np.float64)
    offsets = wheel_offsets(terrain.params)
    states, acts, ctrls = [x.copy()], [a.copy()], []
    hist_rows = []
    nominal = np.tile([0.3, 0.0, 0.0], (cfg.horizon_steps, 1))
    tmap, center = None, None
    tracking, planned = [], []
    reached = bool(np.hypot(*(x[:2] - goal)) <= cfg.goal_tolerance)
    t = 0
    it = 0
    while not reached and t < steps:
        if basis is not None and (center is None or np.hypot(*(x[:2] - center)) > cfg.map_recenter):
            center = x[:2].copy()
            raw = world_feature_map(terrain, basis, center, cfg.map_size, bucket, feature_seed)
            tmap = encode_map(model, raw)
        history = _history(model, hist_rows, x, a, nominal[0], terrain, offsets)
        res = plan(model, tmap, x, a, nominal, goal, cfg, iteration=it, history=history)
        it += 1
        planned.append(res.trajectory)
        k = min(cfg.replan_every, steps - t)
        executed = []
        for j in range(k):
            u = res.controls[j]
            hist_rows.append(_row(x, a, u, terrain, offsets))
            st, ac = true_dynamics_step(vm.VehicleState(*x), vm.ActuatorState(*a), vm.ControlInput(*u),
                                        terrain, cfg.dt)
            x = np.array([float(v) for v in st])
            a = np.array([float(v) for v in ac])
            states.append(x.copy())
            acts.append(a.copy())
            ctrls.append(np.array(u, dtype=np.float64))
            executed.append(x[:2].copy())
            t += 1
            if np.hypot(*(x[:2] - goal)) <= cfg.goal_tolerance:
                reached = True
                break
        ex = np.array(executed)
        tracking.append(float(np.mean(np.hypot(*(ex - res.trajectory[:len(ex), :2]).T))))
        nominal = np.concatenate([res.controls[len(ex):], np.repeat(res.controls[-1:], len(ex), axis=0)])
    time_to_goal = (len(ctrls) * cfg.dt) if reached else None
    return DriveResult(np.array(states), np.array(acts),
                       np.array(ctrls).reshape(-1, 3), reached, len(ctrls), time_to_goal, tracking, planned)


def _row(x, a, u, terrain, offsets):
    wp = wheel_positions(np.array(x[0]), np.array(x[1]), np.array(x[2]), offsets)
    n = average_normal(to_body_frame(terrain.normal_world(wp), np.array(x[2])))
    return np.concatenate([x[3:6], a, u, n])


def _history(model, rows, x, a, u, terrain, offsets):
    need = model.history_steps + 1
    current = _row(x, a, u, terrain, offsets)
    past = list(rows[-(need - 1):]) + [current]
    while len(past) < need:
        past.insert(0, past[0])
    return np.array(past)


def kinematic_time(start, goal, speed):
    """Straight-line travel time at constant ``speed``."""
    return math.dist(np.asarray(start)[:2], np.asarray(goal)[:2]) / speed

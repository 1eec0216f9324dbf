import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from terradyn import mppi
from terradyn import training as tr
from terradyn import world as W
from terradyn.mapping import TerrainFeatureMap


class PointMass:
    """Stand-in dynamics: throttle minus brake is speed, steer is heading."""

    history_steps = 0

    def rollout(self, x0, a0, controls, tmap=None, history=None):
        n, h, _ = controls.shape
        out = np.zeros((n, h, 6))
        pos = np.array(x0[:, :2], dtype=np.float64)
        for k in range(h):
            speed = 4.0 * (controls[:, k, 0] - controls[:, k, 1])
            heading = controls[:, k, 2] * 3.0
            pos = pos + 0.1 * speed[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
            out[:, k, :2] = pos
            out[:, k, 2] = heading
            out[:, k, 3] = speed
        return out


def _cfg(**kw):
    base = dict(n_samples=64, horizon_s=2.0, seed=3)
    base.update(kw)
    return mppi.PlannerConfig(**base)


def _plan(cfg, nominal=None, goal=(6.0, 2.0), it=0, tmap=None):
    nominal = np.tile([0.3, 0.0, 0.0], (cfg.horizon_steps, 1)) if nominal is None else nominal
    return mppi.plan(PointMass(), tmap, np.zeros(6), np.zeros(4), nominal, goal, cfg, iteration=it)


def test_config_validation():
    with pytest.raises(ValueError):
        mppi.PlannerConfig(n_samples=0)
    with pytest.raises(ValueError):
        mppi.PlannerConfig(temperature=0.0)
    with pytest.raises(ValueError):
        mppi.PlannerConfig(horizon_s=1.05)
    assert mppi.PlannerConfig(horizon_s=5.0).horizon_steps == 250


def test_zero_noise_returns_nominal():
    cfg = _cfg(noise_scale=(0.0, 0.0, 0.0))
    nominal = np.tile([0.4, 0.1, -0.05], (cfg.horizon_steps, 1))
    res = _plan(cfg, nominal)
    np.testing.assert_allclose(res.controls, nominal, atol=1e-15)


def test_infinite_temperature_gives_sample_mean():
    cfg = _cfg(temperature=1e12)
    nominal = np.tile([0.5, 0.2, 0.0], (cfg.horizon_steps, 1))
    res = _plan(cfg, nominal)
    samples = np.clip(nominal + mppi.sample_noise(cfg, 0, cfg.horizon_steps), mppi.CONTROL_LOW,
                      mppi.CONTROL_HIGH)
    np.testing.assert_allclose(res.weights, 1.0 / cfg.n_samples, rtol=1e-9)
    np.testing.assert_allclose(res.controls, samples.mean(axis=0), atol=1e-9)


@pytest.mark.parametrize("gap,lam", [(0.0, 1.0), (1.0, 1.0), (3.0, 0.5), (50.0, 10.0)])
def test_two_candidate_softmax(gap, lam):
    w = mppi.softmax_weights([2.0, 2.0 + gap], lam)
    expected = 1.0 / (1.0 + math.exp(-gap / lam))
    assert w[0] == pytest.approx(expected, rel=1e-12)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_softmax_is_a_distribution_peaked_at_the_minimum(costs, lam):
    w = mppi.softmax_weights(costs, lam)
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-12)
    assert w[int(np.argmin(costs))] == w.max()


def test_noise_sample_zero_and_index_stability():
    a = mppi.sample_noise(_cfg(n_samples=8), 4, 10)
    b = mppi.sample_noise(_cfg(n_samples=16), 4, 10)
    assert np.all(a[0] == 0.0)
    np.testing.assert_array_equal(a[1:], b[1:8])
    assert not np.array_equal(a[1:], mppi.sample_noise(_cfg(n_samples=8), 5, 10)[1:])


def test_plan_is_pure():
    cfg = _cfg()
    nominal = np.tile([0.3, 0.0, 0.1], (cfg.horizon_steps, 1))
    before = nominal.copy()
    r1, r2 = _plan(cfg, nominal), _plan(cfg, nominal)
    np.testing.assert_array_equal(nominal, before)
    np.testing.assert_array_equal(r1.controls, r2.controls)
    np.testing.assert_array_equal(r1.costs, r2.costs)


def test_frozen_noise_low_temperature_never_gets_worse():
    cfg = _cfg(temperature=1e-6)
    nominal = np.tile([0.2, 0.0, 0.0], (cfg.horizon_steps, 1))
    costs = []
    for _ in range(6):
        res = _plan(cfg, nominal, it=0)
        costs.append(res.costs[0])   # sample 0 is the current nominal
        assert res.weighted_cost <= res.costs[0] + 1e-12
        nominal = res.controls
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    assert costs[-1] < costs[0]


def test_costs_penalise_invalid_cells():
    cfg = _cfg(w_goal=0.0, w_path=0.0, w_effort=0.0, w_invalid=2.0)
    valid = np.ones((10, 10), dtype=bool)
    valid[5:] = False
    tmap = TerrainFeatureMap.build([0.0, 0.0], 1.0, np.zeros((10, 10, 1)), np.zeros((10, 10)), valid)
    states = np.zeros((2, 4, 6))
    states[0, :, :2] = [2.5, 2.5]
    states[1, :, :2] = [[2.5, 2.5], [6.5, 2.5], [7.5, 2.5], [2.5, 2.5]]
    c = mppi.trajectory_costs(states, np.zeros((2, 4, 3)), [0.0, 0.0], tmap, cfg)
    np.testing.assert_allclose(c, [0.0, 2.0 * 2 * cfg.dt], atol=1e-15)


def test_goal_cost_terms():
    cfg = _cfg(w_goal=1.0, w_path=0.5, w_effort=0.0)
    states = np.zeros((1, 3, 6))
    states[0, :, 0] = [1.0, 2.0, 3.0]
    c = mppi.trajectory_costs(states, np.zeros((1, 3, 3)), [4.0, 0.0], None, cfg)
    assert c[0] == pytest.approx(1.0 + 0.5 * (3 + 2 + 1) * cfg.dt, abs=1e-14)


@pytest.fixture(scope="module")
def flat_world():
    terrain = W.generate_terrain(seed=5, n_classes=1, max_slope_deg=0.0, residual_amplitude=0.0,
                                 calibrate=False)
    model = tr.build_model(tr.TrainingConfig(), params=terrain.params)
    return terrain, model


def test_drive_terminates_when_starting_at_goal(flat_world):
    terrain, model = flat_world
    res = mppi.receding_horizon_drive(model, terrain, [0.5, 0.0], 100, _cfg())
    assert res.reached and res.steps == 0 and res.time_to_goal == 0.0


def test_drive_reaches_nearby_goal(flat_world):
    terrain, model = flat_world
    cfg = _cfg(n_samples=32, horizon_s=3.0, replan_every=10)
    res = mppi.receding_horizon_drive(model, terrain, [12.0, 0.0], 600, cfg)
    assert res.reached
    assert res.controls.shape == (res.steps, 3)
    assert np.all(res.controls >= mppi.CONTROL_LOW) and np.all(res.controls <= mppi.CONTROL_HIGH)
    # with the exact physics and a flat world the plan is followed closely
    assert res.tracking_error < 0.05


def test_kinematic_time():
    assert mppi.kinematic_time([0, 0], [30, 40], 5.0) == pytest.approx(10.0)

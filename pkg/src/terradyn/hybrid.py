"""Parametric vehicle model plus LSTM force compensation, with optional terrain features.

The compensator sees the predicted body velocities, actuator states,
commanded controls, ground normal and parametric forces (and, depending on
the feature mode, raw per-wheel PCA features or their encodings) and adds a
force correction before the body-frame derivatives are taken.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binio
from . import vehicle_model as vm
from .features import MISSING, OBSERVED, FeatureEncoder, FeatureNormalizer, N_ENCODER, N_PCA
from .nn import DenseLayer, LstmCell, Mlp, Module, Parameter
from .nn import autograd as ag
from .world import HALF_TRACK, average_normal, to_body_frame, wheel_offsets, wheel_positions

FEATURE_MODES = ("none", "direct", "compressed")
INIT_HIDDEN = 20
PREDICTOR_HIDDEN = 4
OUTPUT_HIDDEN = 20
# body velocities, actuators, controls: the normalized part of every input row
N_DYN = 3 + 4 + 3
N_HISTORY_IN = N_DYN + 3
N_BASE_IN = N_DYN + 3 + 4
# geometry and the slip floor stay at their measured values
FROZEN_KEYS = ("m", "L_R", "L_F", "C_max")


def _recording():
    return bool(ag._TAPES)


class PhysicalConstants(Module):
    """Trainable constants as ``init + scale * theta`` so all are updated at a similar rate."""

    def __init__(self, base: vm.ParamSet, keys=None, zero_scale=10.0):
        self.base = base
        self.keys = tuple(keys if keys is not None else
                          [k for k in vm.ParamSet.terradynamic_keys() if k not in FROZEN_KEYS])
        init = np.array([getattr(base, k) for k in self.keys], dtype=np.float64)
        self.init = init
        # constants that start at zero (force offsets) move in newtons
        self.scale = np.where(init != 0.0, np.abs(init), zero_scale)
        self.theta = Parameter(np.zeros(len(self.keys)))

    def values(self):
        return self.init + self.scale * self.theta.value

    def paramset(self, differentiable=False):
        if not differentiable:
            return self.base.replace(**{k: float(v) for k, v in zip(self.keys, self.values())})
        full = ag.add(self.init, ag.mul(self.scale, self.theta))
        return self.base.replace(**{k: full[i] for i, k in enumerate(self.keys)})

    def vector(self, differentiable=False):
        """Every ParamSet value in key order, trainable entries live (see ``vm.param_vector``)."""
        full = vm.param_vector(self.base)
        idx = [vm.PARAM_INDEX[k] for k in self.keys]
        if not differentiable:
            full[idx] = self.values()
            return full
        scatter = np.zeros((len(self.keys), len(full)))
        scatter[np.arange(len(idx)), idx] = 1.0
        full[idx] = 0.0
        live = ag.add(self.init, ag.mul(self.scale, self.theta))
        return ag.add(full, ag.matmul(live, scatter))

    def rebase(self, params: vm.ParamSet):
        """Replace the non-trainable constants (e.g. fitted actuator delays)."""
        self.base = params.replace(**{k: getattr(self.base, k) for k in self.keys})


@dataclass
class MapQuery:
    """Per-wheel ground normals (body frame) and feature inputs for one batch of poses."""

    normals: np.ndarray      # (..., 4, 3)
    features: np.ndarray     # (..., 4, n) raw PCA values or encoded map codes
    validity: np.ndarray     # (..., 4) in {-1, +1}
    encoded: bool = False

    def __post_init__(self):
        n = np.linalg.norm(self.normals, axis=-1)
        if not np.allclose(n, 1.0, atol=1e-6):
            raise ValueError("wheel normals must be unit length")
        if not np.all(np.isin(self.validity, (MISSING, OBSERVED))):
            raise ValueError("validity flags must be -1 or +1")


class HybridModel(Module):
    """Parametric model with force compensation (and an optional terrain-feature path)."""

    def __init__(self, params=None, feature_mode="none", n_pca=N_PCA, n_encoder=N_ENCODER,
                 seed=0, tau=0.2, dt=vm.DT, horizon=5.0, half_track=HALF_TRACK):
        if feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        steps = tau / dt, horizon / dt
        if any(abs(s - round(s)) > 1e-9 for s in steps):
            raise ValueError("tau and horizon must be whole multiples of dt")
        rng = np.random.default_rng(seed)
        self.feature_mode = feature_mode
        self.n_pca = int(n_pca)
        self.n_encoder = int(n_encoder)
        self.dt, self.tau, self.horizon = float(dt), float(tau), float(horizon)
        self.half_track = float(half_track)
        self.physics = PhysicalConstants(params or vm.ParamSet())
        self.init_lstm = LstmCell(N_HISTORY_IN, INIT_HIDDEN, rng)
        self.init_head = DenseLayer(INIT_HIDDEN, 2 * PREDICTOR_HIDDEN, "identity", rng)
        self.encoder = FeatureEncoder(n_pca, n_encoder, rng) if feature_mode == "compressed" else None
        self.lstm = LstmCell(N_BASE_IN + 4 * self.feature_width, PREDICTOR_HIDDEN, rng)
        self.out_net = Mlp([PREDICTOR_HIDDEN, OUTPUT_HIDDEN, 4], rng)
        # start from the pure parametric model
        self.out_net.layers[-1].zero_()
        # fixed input statistics, set from training data
        self.dyn_mean = np.zeros(N_DYN)
        self.dyn_scale = np.ones(N_DYN)
        self.force_scale = np.full(4, 1000.0)
        self.normalizer = FeatureNormalizer(np.zeros(self.n_pca), np.ones(self.n_pca))

    # --- sizes -------------------------------------------------------------------

    @property
    def history_steps(self):
        return int(round(self.tau / self.dt))

    @property
    def horizon_steps(self):
        return int(round(self.horizon / self.dt))

    @property
    def feature_width(self):
        """Per-wheel width of the feature part of the compensator input."""
        return {"none": 0, "direct": self.n_pca + 1, "compressed": self.n_encoder}[self.feature_mode]

    @property
    def params(self):
        return self.physics.paramset()

    def wheel_offsets(self):
        return wheel_offsets(self.physics.base, self.half_track)

    # --- persistence ---------------------------------------------------------------

    def config(self):
        return {"feature_mode": self.feature_mode, "n_pca": self.n_pca, "n_encoder": self.n_encoder,
                "tau": self.tau, "dt": self.dt, "horizon": self.horizon, "half_track": self.half_track,
                "trainable_keys": list(self.physics.keys)}

    def buffers(self):
        return {"buffer.dyn_mean": self.dyn_mean, "buffer.dyn_scale": self.dyn_scale,
                "buffer.force_scale": self.force_scale,
                "buffer.feature_mean": self.normalizer.mean, "buffer.feature_scale": self.normalizer.scale}

    def load_buffers(self, arrays):
        self.dyn_mean = np.asarray(arrays["buffer.dyn_mean"], dtype=np.float64)
        self.dyn_scale = np.asarray(arrays["buffer.dyn_scale"], dtype=np.float64)
        self.force_scale = np.asarray(arrays["buffer.force_scale"], dtype=np.float64)
        self.normalizer = FeatureNormalizer(np.asarray(arrays["buffer.feature_mean"], dtype=np.float64),
                                            np.asarray(arrays["buffer.feature_scale"], dtype=np.float64))

    # --- input assembly -------------------------------------------------------------

    def feature_inputs(self, values, validity):
        """Per-wheel feature inputs (..., 4, feature_width) from PCA values (..., 4, >= n_pca)."""
        if self.feature_mode == "none":
            return None
        x = self.normalizer.inputs(np.asarray(values, dtype=np.float64)[..., :self.n_pca], validity)
        if self.feature_mode == "direct":
            return x
        return self.encoder.net(x)

    def missing_feature_input(self):
        """Per-wheel input used where nothing is known (out of map or unobserved)."""
        if self.feature_mode == "none":
            return None
        x = self.normalizer.inputs(np.zeros(self.n_pca), MISSING)
        return np.asarray(ag.value_of(x if self.feature_mode == "direct" else self.encoder.net(x)))

    def _dyn(self, state, act, ctrl):
        cols = [state.v_x, state.v_y, state.r, *act, *ctrl]
        return [(c - m) / s for c, m, s in zip(cols, self.dyn_mean, self.dyn_scale)]

    def init_hidden(self, history):
        """Predictor state (h0, c0) from true history rows (B, n_hist, N_HISTORY_IN)."""
        history = np.asarray(history, dtype=np.float64)
        norm = history.copy()
        norm[..., :N_DYN] = (norm[..., :N_DYN] - self.dyn_mean) / self.dyn_scale
        batch = history.shape[0]
        h, c = self.init_lstm.zeros(batch)
        for k in range(history.shape[1]):
            h, c = self.init_lstm.step(norm[:, k], h, c)
        out = self.init_head(h)
        n = PREDICTOR_HIDDEN
        return ag.tanh(out[:, :n]), out[:, n:]

    @staticmethod
    def history_rows(states, actuators, controls, normals):
        """Assemble init-network inputs from per-row arrays (..., T, ·); normals are (..., T, 3)."""
        return np.concatenate([states[..., 3:6], actuators, controls, normals], axis=-1)

    # --- one step ---------------------------------------------------------------------

    def compensation(self, state, act, ctrl, eta, forces, feat, h, c):
        """Force correction and the next predictor state."""
        cols = self._dyn(state, act, ctrl) + [eta.eta_x, eta.eta_y, eta.eta_z]
        cols += [f / s for f, s in zip(forces, self.force_scale)]
        x = ag.stack(cols, axis=-1)
        if feat is not None:
            x = ag.concat([x, feat], axis=-1)
        h, c = self.lstm.step(x, h, c)
        delta = ag.mul(self.out_net(h), self.force_scale)
        return delta, h, c

    def step(self, pvec, x, u, eta, feat, h, c):
        """Advance packed states (B, 10) and the predictor by one ``dt``.

        ``pvec`` comes from ``self.physics.vector``, ``u`` (B, 3) are controls,
        ``eta`` (B, 3) wheel-averaged body normals and ``feat`` (B, 4 * width)
        the feature inputs or None.
        """
        u = np.stack([np.clip(u[:, 0], 0.0, 1.0), np.clip(u[:, 1], 0.0, 1.0),
                      np.clip(u[:, 2], -vm.MAX_STEER, vm.MAX_STEER)], axis=-1)
        forces = vm.packed_forces(x, u, eta, pvec)
        fixed = np.concatenate([(u - self.dyn_mean[7:]) / self.dyn_scale[7:], eta], axis=-1)
        parts = [ag.div(ag.sub(x[:, 3:10], self.dyn_mean[:7]), self.dyn_scale[:7]), fixed,
                 ag.div(forces, self.force_scale)]
        if feat is not None:
            parts.append(feat)
        hc = ag.lstm_step(ag.concat(parts, axis=-1), h, c, self.lstm.w_input, self.lstm.w_hidden,
                          self.lstm.bias)
        n = PREDICTOR_HIDDEN
        h, c = hc[:, :n], hc[:, n:]
        delta = ag.mul(self.out_net(h), self.force_scale)
        return vm.packed_advance(x, ag.add(forces, delta), u, eta, pvec, self.dt), h, c

    def compensated_derivative(self, state, actuators, control, map_query, hidden):
        """State derivative with compensation; ``hidden`` is the predictor (h, c)."""
        if hidden is None:
            raise RuntimeError("compensator hidden state is not initialized")
        h, c = hidden
        P = self.params
        eta = vm.SurfaceNormal.from_vector(average_normal(map_query.normals))
        feat = self._query_inputs(map_query)
        forces = vm.compute_forces(state, actuators, control, eta, P)
        delta, h, c = self.compensation(state, actuators, control, eta, forces, feat, h, c)
        delta = np.asarray(ag.value_of(delta))
        forces = vm.ForceVector(*(f + delta[..., i] for i, f in enumerate(forces)))
        return vm.body_derivatives(state, forces, actuators.steer_angle, eta, P), (
            np.asarray(ag.value_of(h)), np.asarray(ag.value_of(c)))

    def _query_inputs(self, q):
        if self.feature_mode == "none":
            return None
        if q.encoded:
            x = q.features
        else:
            x = np.asarray(ag.value_of(self.feature_inputs(q.features, q.validity)))
        return x.reshape(x.shape[:-2] + (-1,))

    # --- rollouts ---------------------------------------------------------------------

    def rollout_teacher_forced(self, start, actuators, controls, normals, feats, hidden,
                               truncate_steps=0):
        """Roll out from ``start`` with logged inputs, batch-first arrays.

        ``controls`` (B, H, 3), ``normals`` (B, H, 3) averaged body-frame,
        ``feats`` (B, H, 4 * width) or None. Returns a dict of (B, H) series.
        With ``truncate_steps`` > 0 gradients are cut every that many steps.
        """
        recording = _recording()
        pvec = self.physics.vector(differentiable=recording)
        x = np.concatenate([start, actuators], axis=-1)
        h, c = hidden
        if feats is not None and ag.is_tensor(feats):
            feats = ag.transpose(feats, (1, 0, 2))
        elif feats is not None:
            feats = np.ascontiguousarray(np.swapaxes(feats, 0, 1))
        xs = []
        for t in range(controls.shape[1]):
            if recording and truncate_steps and t and t % truncate_steps == 0:
                x, h, c = ag.stop_gradient(x), ag.stop_gradient(h), ag.stop_gradient(c)
            feat = None if feats is None else feats[t]
            x, h, c = self.step(pvec, x, controls[:, t], normals[:, t], feat, h, c)
            if not recording:
                x, h, c = ag.value_of(x), ag.value_of(h), ag.value_of(c)
            xs.append(x)
        traj = ag.stack(xs, axis=1)
        return {k: traj[..., i] for i, k in enumerate(vm.STATE_FIELDS)}

    def rollout(self, initial_state, initial_actuators, control_sequence, terrain_map,
                history=None, hidden=None):
        """Closed-loop rollout over a feature map for a batch of start poses.

        ``initial_state`` (B, 6) or (6,), ``control_sequence`` (B, H, 3) or (H, 3).
        ``history`` gives init-network rows (B, n_hist, 13); without it the
        start state is repeated. Returns predicted states (B, H, 6).
        """
        x0 = np.atleast_2d(np.asarray(initial_state, dtype=np.float64))
        a0 = np.atleast_2d(np.asarray(initial_actuators, dtype=np.float64))
        u = np.asarray(control_sequence, dtype=np.float64)
        if u.ndim == 2:
            u = np.broadcast_to(u, (x0.shape[0],) + u.shape)
        batch, steps = u.shape[0], u.shape[1]
        offsets = self.wheel_offsets()
        pvec = self.physics.vector()
        state = vm.VehicleState(*(x0[:, i] for i in range(6)))
        if hidden is None:
            if history is None:
                q = self.query_map(terrain_map, state, offsets)
                eta0 = average_normal(q.normals)
                row = np.concatenate([x0[:, 3:6], a0, u[:, 0], eta0], axis=-1)
                history = np.repeat(row[:, None], self.history_steps + 1, axis=1)
            h, c = (np.asarray(ag.value_of(v)) for v in self.init_hidden(history))
        else:
            h, c = hidden
        x = np.concatenate([x0, a0], axis=-1)
        out = np.empty((batch, steps, 6))
        for t in range(steps):
            q = self.query_map(terrain_map, vm.VehicleState(*(x[:, i] for i in range(6))), offsets)
            x, h, c = self.step(pvec, x, u[:, t], average_normal(q.normals), self._query_inputs(q), h, c)
            x, h, c = (np.asarray(ag.value_of(v)) for v in (x, h, c))
            out[:, t] = x[:, :6]
        return out

    def query_map(self, terrain_map, state, offsets=None):
        """Per-wheel map lookup at the wheel positions of (batched) ``state``."""
        offsets = self.wheel_offsets() if offsets is None else offsets
        phi = np.asarray(state.phi, dtype=np.float64)
        wheels = wheel_positions(np.asarray(state.p_x), np.asarray(state.p_y), phi, offsets)
        if terrain_map is None:
            shape = wheels.shape[:-1]
            return MapQuery(np.broadcast_to([0.0, 0.0, 1.0], shape + (3,)).copy(),
                            np.zeros(shape + (self.n_pca,)), np.full(shape, MISSING))
        res = terrain_map.query(wheels)
        return MapQuery(to_body_frame(res.normal, phi), res.feature, res.validity,
                        encoded=terrain_map.encoded)


def encode_map(model, terrain_map):
    """Copy of ``terrain_map`` whose cells hold the model's per-wheel feature inputs.

    Invalid cells get the model's missing-feature input, so queries never
    need the encoder during rollouts.
    """
    out = terrain_map.copy()
    if model.feature_mode == "none":
        return out
    flag = np.where(terrain_map.valid, OBSERVED, MISSING)
    out.feature = np.asarray(ag.value_of(model.feature_inputs(terrain_map.feature, flag)))
    out.fill_value = model.missing_feature_input()
    out.feature[~terrain_map.valid] = out.fill_value
    out.encoded = True
    return out


# --- weights ------------------------------------------------------------------------------

def model_arrays(model):
    from .nn import state_dict
    arrays = dict(state_dict(model))
    arrays.update(model.buffers())
    return arrays


def save_model(path, model, extra_meta=None):
    from .nn import save_weights
    meta = {"model": model.config(), "params_base": model.physics.base.as_dict()}
    meta.update(extra_meta or {})
    save_weights(path, model_arrays(model), meta)


def load_model(path):
    from .nn import load_state_dict, load_weights
    arrays, meta = load_weights(path)
    cfg = dict(meta["model"])
    keys = cfg.pop("trainable_keys")
    model = HybridModel(vm.ParamSet(**meta["params_base"]), **cfg)
    model.physics = PhysicalConstants(model.physics.base, keys)
    params = {k: v for k, v in arrays.items() if not k.startswith("buffer.")}
    load_state_dict(model, params)
    model.load_buffers(arrays)
    return model, meta


# --- trajectories --------------------------------------------------------------------------

@dataclass
class Trajectory:
    time: np.ndarray        # (T,)
    states: np.ndarray      # (T, 6)
    actuators: np.ndarray   # (T, 4)
    controls: np.ndarray    # (T, 3)
    wheel_features: np.ndarray  # (T, 4, k)
    wheel_validity: np.ndarray  # (T, 4)

    def to_bytes(self):
        arrays = {"time": self.time, "states": self.states, "actuators": self.actuators,
                  "controls": self.controls, "wheel_features": self.wheel_features,
                  "wheel_validity": self.wheel_validity}
        return binio.dumps("trajectory", arrays, {"fields": list(vm.STATE_FIELDS)})

    @classmethod
    def from_bytes(cls, data):
        _, _, _, a = binio.loads(data, expect_kind="trajectory")
        return cls(a["time"], a["states"], a["actuators"], a["controls"],
                   a["wheel_features"], a["wheel_validity"])

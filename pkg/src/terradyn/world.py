"""Synthetic ground truth: terrain, terrain-dependent true dynamics, visual features, logs.

Terrain classes and elevation are smooth random-Fourier fields, so every
quantity is a deterministic function of position and seed. Synthetic VFM
features are linear in a small set of latent variables (class mixture,
texture, per-bucket drift, per-cell noise); the latents are generated by
counter-based hashing so any (position, bucket, seed) can be evaluated
independently and in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import binio
from . import vehicle_model as vm
from .features import MISSING, N_VFM, OBSERVED, FeatureVector, pca_project

BUCKET_NAMES = ("hindsight", "-20m", "-10m", "0m", "10m", "20m", "30m", "40m")
BUCKET_DISTANCES = (None, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0, 40.0)
HINDSIGHT = 0
N_BUCKETS = len(BUCKET_NAMES)
DEFAULT_VALIDITY = (1.0, 0.87, 0.92, 0.92, 0.84, 0.65, 0.42, 0.21)

# (grip on D_F/D_R, rolling-resistance scale on beta, drag scale)
ARCHETYPES = (
    ("packed_sand", 1.0, 1.0, 1.0),
    ("mud", 0.6, 3.0, 1.5),
    ("loose_dirt", 0.8, 1.8, 1.0),
    ("tall_grass", 0.75, 2.2, 1.4),
    ("dense_vegetation", 0.85, 3.6, 2.5),
    ("rocky_slope", 1.1, 1.3, 1.0),
)

HALF_TRACK = 0.8
HORIZON_S = 5.0
TAU_S = 0.2


def bucket_index(name):
    if isinstance(name, (int, np.integer)) and 0 <= name < N_BUCKETS:
        return int(name)
    key = str(name)
    if key in BUCKET_NAMES:
        return BUCKET_NAMES.index(key)
    if key + "m" in BUCKET_NAMES:
        return BUCKET_NAMES.index(key + "m")
    raise ValueError(f"unknown distance bucket {name!r}")


# --- counter-based random numbers ----------------------------------------------

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    z = z + _GOLD
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _as_u64(k):
    return np.asarray(k).astype(np.int64).view(np.uint64)


def hash_uniform(*keys):
    """Uniform numbers in (0, 1) from integer keys (broadcast together)."""
    with np.errstate(over="ignore"):
        h = np.full((), 0x5EED, dtype=np.uint64)
        for k in keys:
            h = _mix(np.bitwise_xor(h, _as_u64(k)))
        return ((np.asarray(h) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def hash_normal(*keys):
    """Standard normal numbers; the last key axis is consumed pairwise via Box-Muller."""
    u1 = hash_uniform(*keys, 1)
    u2 = hash_uniform(*keys, 2)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _cell(xy, size):
    return np.floor(np.asarray(xy, dtype=np.float64) / size).astype(np.int64)


# --- terrain ---------------------------------------------------------------------

@dataclass
class SyntheticFeatureModel:
    """Linear generative model of 384-d visual features with distance corruption."""

    base: np.ndarray           # (n_vfm,)
    class_embed: np.ndarray    # (K, n_vfm)
    texture_basis: np.ndarray  # (n_tex, n_vfm)
    noise_basis: np.ndarray    # (n_noise, n_vfm)
    depth_dir: np.ndarray      # (n_vfm,)
    bucket_offset: np.ndarray  # (8, n_vfm) lighting/viewpoint shift, zero for hindsight
    bucket_depth: np.ndarray   # (8,)
    bucket_noise: np.ndarray   # (8,)
    bucket_confusion: np.ndarray  # (8,)
    confusion_class: int
    validity: np.ndarray       # (8,)
    drift_scale: float = 1.0
    texture_cell: float = 0.2
    noise_cell: float = 1.0
    validity_cell: float = 1.0
    seed: int = 0

    @property
    def n_vfm(self):
        return self.base.shape[0]

    @property
    def n_classes(self):
        return self.class_embed.shape[0]

    def drift(self, bucket):
        """Constant feature offset of a bucket (zero for hindsight)."""
        confusion = self.class_embed[self.confusion_class] - self.class_embed.mean(axis=0)
        return (self.drift_scale * (self.bucket_depth[bucket] * self.depth_dir
                                    + self.bucket_offset[bucket])
                + self.bucket_confusion[bucket] * confusion)

    def latent_basis(self, bucket):
        """Rows mapping (class weights, texture, noise) latents to feature space."""
        return np.concatenate([self.class_embed, self.texture_basis,
                               self.bucket_noise[bucket] * self.noise_basis], axis=0)


@dataclass
class TerrainField:
    seed: int
    extent: float
    class_names: tuple
    modifiers: np.ndarray      # (K, 3)
    wave_vec: np.ndarray       # (K, W, 2)
    wave_phase: np.ndarray     # (K, W)
    wave_amp: np.ndarray       # (K, W)
    sharpness: float
    elev_vec: np.ndarray       # (E, 2)
    elev_phase: np.ndarray     # (E,)
    elev_amp: np.ndarray       # (E,)
    features: SyntheticFeatureModel
    params: vm.ParamSet = field(default_factory=vm.ParamSet)
    residual_amplitude: float = 0.05

    @property
    def n_classes(self):
        return len(self.class_names)

    def class_weights(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        if self.n_classes == 1:
            return np.ones(xy.shape[:-1] + (1,))
        arg = np.einsum("...d,kwd->...kw", xy, self.wave_vec) + self.wave_phase
        logits = self.sharpness * np.einsum("...kw,kw->...k", np.cos(arg), self.wave_amp)
        logits -= logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=-1, keepdims=True)

    def modifiers_at(self, xy):
        """(grip, rolling resistance, drag) scales at positions (..., 2)."""
        return self.class_weights(xy) @ self.modifiers

    def elevation(self, xy):
        arg = np.asarray(xy, dtype=np.float64) @ self.elev_vec.T + self.elev_phase
        return np.cos(arg) @ self.elev_amp

    def elevation_gradient(self, xy):
        arg = np.asarray(xy, dtype=np.float64) @ self.elev_vec.T + self.elev_phase
        return (-np.sin(arg) * self.elev_amp) @ self.elev_vec

    def max_slope_bound(self):
        """Upper bound on |grad h| over the whole plane."""
        return float(np.sum(np.abs(self.elev_amp) * np.linalg.norm(self.elev_vec, axis=1)))

    def normal_world(self, xy):
        g = self.elevation_gradient(xy)
        n = np.concatenate([-g, np.ones(g.shape[:-1] + (1,))], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _unit_rows(rng, n, dim):
    q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
    return q.T


def make_feature_model(seed, n_classes, n_vfm=N_VFM, n_texture=48, n_noise=16,
                       validity=DEFAULT_VALIDITY, texture_norm=3.0, texture_decay=0.93,
                       noise_norm=0.8, depth_norm=0.3, confusion=0.12, class_names=None):
    rng = np.random.default_rng([seed, 1])
    dirs = _unit_rows(rng, n_texture + n_noise + 1, n_vfm)
    dist = np.array([0.0 if d is None else d for d in BUCKET_DISTANCES])
    noise = np.where(np.arange(N_BUCKETS) == HINDSIGHT, 0.0, 0.5 + np.abs(dist) / 10.0)
    offset = rng.standard_normal((N_BUCKETS, n_vfm))
    offset[HINDSIGHT] = 0.0
    names = class_names or [a[0] for a in ARCHETYPES[:n_classes]]
    confusion_class = names.index("dense_vegetation") if "dense_vegetation" in names else n_classes - 1
    model = SyntheticFeatureModel(
        base=rng.standard_normal(n_vfm),
        class_embed=rng.standard_normal((n_classes, n_vfm)),
        texture_basis=(texture_norm * texture_decay ** np.arange(n_texture))[:, None] * dirs[:n_texture],
        noise_basis=noise_norm * dirs[n_texture:n_texture + n_noise],
        depth_dir=dirs[-1] * depth_norm * math.sqrt(n_vfm),
        bucket_offset=offset,
        bucket_depth=dist / 10.0,
        bucket_noise=noise,
        bucket_confusion=confusion * np.maximum(dist, 0.0) / 10.0,
        confusion_class=confusion_class,
        validity=np.asarray(validity, dtype=np.float64),
        seed=seed,
    )
    return model


def generate_terrain(seed=0, extent=300.0, n_classes=6, max_slope_deg=15.0, n_waves=8,
                     sharpness=3.0, calibrate=True, params=None, residual_amplitude=0.05,
                     **feature_kwargs):
    """Procedural terrain, deterministic in ``seed``.

    Class fields use wavelengths of 15-60 m; elevation wavelengths of
    20-80 m with amplitudes scaled so no slope exceeds ``max_slope_deg``.
    """
    if not extent > 0:
        raise ValueError("extent must be positive")
    if not 1 <= n_classes <= len(ARCHETYPES):
        raise ValueError(f"n_classes must be in 1..{len(ARCHETYPES)}")
    rng = np.random.default_rng([seed, 0])
    lam = rng.uniform(15.0, 60.0, (n_classes, n_waves))
    ang = rng.uniform(0.0, 2 * np.pi, (n_classes, n_waves))
    wave_vec = np.stack([np.cos(ang), np.sin(ang)], axis=-1) * (2 * np.pi / lam)[..., None]
    wave_phase = rng.uniform(0.0, 2 * np.pi, (n_classes, n_waves))
    wave_amp = rng.standard_normal((n_classes, n_waves)) * math.sqrt(2.0 / n_waves)
    n_elev = 10
    lam_e = rng.uniform(20.0, 80.0, n_elev)
    ang_e = rng.uniform(0.0, 2 * np.pi, n_elev)
    elev_vec = np.stack([np.cos(ang_e), np.sin(ang_e)], axis=-1) * (2 * np.pi / lam_e)[:, None]
    elev_phase = rng.uniform(0.0, 2 * np.pi, n_elev)
    raw_amp = rng.uniform(0.2, 1.0, n_elev)
    bound = np.sum(raw_amp * np.linalg.norm(elev_vec, axis=1))
    elev_amp = raw_amp * math.tan(math.radians(max_slope_deg)) / bound
    names = tuple(a[0] for a in ARCHETYPES[:n_classes])
    modifiers = np.array([a[1:] for a in ARCHETYPES[:n_classes]], dtype=np.float64)
    features = make_feature_model(seed, n_classes, class_names=list(names), **feature_kwargs)
    terrain = TerrainField(seed, float(extent), names, modifiers, wave_vec, wave_phase, wave_amp,
                           float(sharpness), elev_vec, elev_phase, elev_amp, features,
                           params or vm.ParamSet(), residual_amplitude)
    if calibrate and n_classes > 1:
        calibrate_drift(terrain)
    return terrain


# --- features ----------------------------------------------------------------------

def feature_latents(terrain, xy, bucket, seed):
    """Latent coefficients and validity for positions (n, 2) in one bucket.

    Returns ``(latents (n, K + n_tex + n_noise), valid (n,) bool)``.
    """
    fm = terrain.features
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    w = terrain.class_weights(xy)
    tcell = _cell(xy, fm.texture_cell)
    n_tex = fm.texture_basis.shape[0]
    tex = hash_normal(fm.seed, 11, tcell[:, :1], tcell[:, 1:], np.arange(n_tex))
    n_noise = fm.noise_basis.shape[0]
    if bucket == HINDSIGHT:
        noise = np.zeros((len(xy), n_noise))
        valid = np.ones(len(xy), dtype=bool)
    else:
        ncell = _cell(xy, fm.noise_cell)
        noise = hash_normal(seed, 12, bucket, ncell[:, :1], ncell[:, 1:], np.arange(n_noise))
        vcell = _cell(xy, fm.validity_cell)
        valid = hash_uniform(seed, 13, bucket, vcell[:, 0], vcell[:, 1]) < fm.validity[bucket]
    return np.concatenate([w, tex, noise], axis=1), valid


def raw_features(terrain, xy, bucket, seed):
    """Full 384-d features (n, n_vfm) and validity (n,)."""
    fm = terrain.features
    z, valid = feature_latents(terrain, xy, bucket, seed)
    return fm.base + fm.drift(bucket) + z @ fm.latent_basis(bucket), valid


def projected_features(terrain, xy, bucket, seed, basis):
    """PCA coordinates of the features, computed without materializing 384-d vectors."""
    fm = terrain.features
    z, valid = feature_latents(terrain, xy, bucket, seed)
    offset = pca_project(basis, fm.base + fm.drift(bucket))
    return offset + z @ (fm.latent_basis(bucket) @ basis.components.T), valid


def synthesize_features(terrain, position, bucket, seed):
    """Feature observed at ``position`` through distance bucket ``bucket``."""
    b = bucket_index(bucket)
    vals, valid = raw_features(terrain, np.asarray(position, dtype=np.float64)[None, :2], b, seed)
    if not valid[0]:
        return FeatureVector.missing(terrain.features.n_vfm)
    return FeatureVector(vals[0], OBSERVED)


def bucket_shift_ratio(terrain, n_positions=2000, seed=0):
    """Mean over adjacent bucket pairs and dims of |mean shift| / dataset range."""
    rng = np.random.default_rng([seed, 7])
    half = terrain.extent / 2
    xy = rng.uniform(-half, half, (n_positions, 2))
    means, lo, hi = [], None, None
    for b in range(N_BUCKETS):
        vals, valid = raw_features(terrain, xy, b, seed)
        vals = vals[valid]
        means.append(vals.mean(axis=0))
        lo = vals.min(axis=0) if lo is None else np.minimum(lo, vals.min(axis=0))
        hi = vals.max(axis=0) if hi is None else np.maximum(hi, vals.max(axis=0))
    rng_d = hi - lo
    shifts = [np.abs(means[b + 1] - means[b]) / rng_d for b in range(1, N_BUCKETS - 1)]
    return float(np.mean(shifts))


def calibrate_drift(terrain, target=0.30, n_positions=800, iters=18):
    """Set the drift scale so adjacent buckets differ by ``target`` of the feature range."""
    fm = terrain.features
    lo, hi = 0.0, 32.0
    for _ in range(iters):
        fm.drift_scale = 0.5 * (lo + hi)
        if bucket_shift_ratio(terrain, n_positions, seed=fm.seed) < target:
            lo = fm.drift_scale
        else:
            hi = fm.drift_scale
    fm.drift_scale = 0.5 * (lo + hi)
    return fm.drift_scale


# --- vehicle geometry and true dynamics --------------------------------------------

def wheel_offsets(params, half_track=HALF_TRACK):
    """Body-frame wheel positions in FL, FR, RL, RR order, shape (4, 2)."""
    lf, lr = float(params.L_F), float(params.L_R)
    return np.array([[lf, half_track], [lf, -half_track], [-lr, half_track], [-lr, -half_track]])


def wheel_positions(p_x, p_y, phi, offsets):
    """World wheel positions (..., 4, 2) for poses given as arrays (...)."""
    c, s = np.cos(phi)[..., None], np.sin(phi)[..., None]
    ox, oy = offsets[:, 0], offsets[:, 1]
    x = np.asarray(p_x)[..., None] + c * ox - s * oy
    y = np.asarray(p_y)[..., None] + s * ox + c * oy
    return np.stack([x, y], axis=-1)


def to_body_frame(normal_world, phi):
    """Rotate world-frame normals (..., 4, 3) into the body frame of yaw ``phi`` (...)."""
    c, s = np.cos(phi)[..., None], np.sin(phi)[..., None]
    nx, ny, nz = normal_world[..., 0], normal_world[..., 1], normal_world[..., 2]
    return np.stack([c * nx + s * ny, -s * nx + c * ny, nz], axis=-1)


def average_normal(wheel_normals):
    n = np.mean(wheel_normals, axis=-2)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def residual_forces(state, forces, params, amplitude):
    """Smooth state-dependent force error the parametric model does not capture."""
    p = params
    denom = np.maximum(p.C_max, state.v_x)
    a_r = np.arctan((state.v_y - p.L_R * state.r) / denom)
    a_f = np.arctan((state.v_y + p.L_F * state.r) / denom)
    return vm.ForceVector(
        -amplitude * np.abs(forces.F_x) * np.tanh(0.3 * state.v_x),
        amplitude * abs(p.D_F) * np.sin(2.0 * a_f),
        amplitude * abs(p.D_R) * np.sin(2.0 * a_r),
        -amplitude * p.C_r_d * state.r * np.abs(state.v_x) / 5.0,
    )


def true_dynamics_step(state, actuators, control, terrain, dt=vm.DT):
    """One step of the data-generating simulator; returns ``(state, actuators)``."""
    p = terrain.params
    offsets = wheel_offsets(p)
    wheels = wheel_positions(state.p_x, state.p_y, state.phi, offsets)
    mods = terrain.modifiers_at(wheels)            # (..., 4, 3)
    grip_f = mods[..., :2, 0].mean(axis=-1)
    grip_r = mods[..., 2:, 0].mean(axis=-1)
    rr = mods[..., 1].mean(axis=-1)
    drag = mods[..., 2].mean(axis=-1)
    local = p.replace(D_F=p.D_F * grip_f, D_R=p.D_R * grip_r, rr_scale=p.rr_scale * rr,
                      C_x_d=p.C_x_d * drag, C_y_d=p.C_y_d * drag)
    eta = vm.SurfaceNormal.from_vector(average_normal(to_body_frame(terrain.normal_world(wheels), np.asarray(state.phi))))
    forces = vm.compute_forces(state, actuators, control, eta, local)
    if terrain.residual_amplitude:
        res = residual_forces(state, forces, local, terrain.residual_amplitude)
        forces = vm.ForceVector(*(f + r for f, r in zip(forces, res)))
    deriv = vm.body_derivatives(state, forces, actuators.steer_angle, eta, local)
    nxt = vm.euler_step(state, deriv, dt)
    return nxt, vm.step_actuators(actuators, control, state.v_x, p, dt)


# --- scripted driving ------------------------------------------------------------------

@dataclass
class ScriptedDriver:
    """Speed-tracking driver with sinusoidal steering, throttle sweeps and braking events."""

    seed: int = 0
    extent: float = 300.0
    speed_median: float = 4.9
    speed_spread: float = 0.45
    segment_s: tuple = (3.0, 9.0)
    brake_prob: float = 0.15
    steer_amp: float = 0.22
    dt: float = vm.DT

    def __post_init__(self):
        self._rng = np.random.default_rng([self.seed, 3])
        self._t = 0.0
        self._seg_end = 0.0
        self._target = self.speed_median
        self._braking = False
        self._freqs = self._rng.uniform(0.1, 0.35, 3)
        self._phases = self._rng.uniform(0, 2 * np.pi, 3)
        self._sweep = self._rng.uniform(0.05, 0.2)

    def _new_segment(self, v):
        r = self._rng
        self._seg_end = self._t + r.uniform(*self.segment_s)
        self._braking = r.uniform() < self.brake_prob and v > 3.0
        if self._braking:
            self._target = max(0.5, 0.3 * v)
        else:
            self._target = float(np.clip(self.speed_median * np.exp(self.speed_spread * r.standard_normal()), 1.5, 10.0))

    def __call__(self, state):
        if self._t >= self._seg_end:
            self._new_segment(state.v_x)
        err = self._target - state.v_x
        sweep = 0.15 * math.sin(2 * math.pi * self._sweep * self._t)
        throttle = float(np.clip(0.35 + 0.25 * err + sweep, 0.0, 1.0))
        brake = 0.0
        if err < -0.8:
            throttle = 0.0
            brake = float(np.clip(-0.25 * err, 0.0, 0.8 if self._braking else 0.4))
        steer = self.steer_amp * float(np.sum(np.sin(2 * np.pi * self._freqs * self._t + self._phases))) / 1.5
        # pull back toward the middle of the world near its edge
        radius = math.hypot(state.p_x, state.p_y)
        limit = 0.35 * self.extent
        if radius > limit:
            bearing = math.atan2(-state.p_y, -state.p_x)
            heading_err = (bearing - state.phi + math.pi) % (2 * math.pi) - math.pi
            w = min(1.0, (radius - limit) / (0.1 * self.extent))
            steer = (1 - w) * steer + w * float(np.clip(1.5 * heading_err, -vm.MAX_STEER, vm.MAX_STEER))
        self._t += self.dt
        return vm.ControlInput(throttle, brake, steer)


@dataclass
class DrivingLog:
    dt: float
    seed: int
    states: np.ndarray      # (T, 6)
    actuators: np.ndarray   # (T, 4)
    controls: np.ndarray    # (T, 3) applied from row k to k + 1
    wheels: np.ndarray      # (T, 4, 2) world positions
    normals: np.ndarray     # (T, 4, 3) body frame

    def __len__(self):
        return len(self.states)

    def features(self, terrain, basis, bucket):
        """PCA features (T, 4, n_pca) and validity (T, 4) for one bucket along the log."""
        xy = self.wheels.reshape(-1, 2)
        vals, valid = projected_features(terrain, xy, bucket, self.seed, basis)
        return vals.reshape(len(self), 4, -1), valid.reshape(len(self), 4)


def _start_state(terrain, seed):
    rng = np.random.default_rng([seed, 4])
    half = 0.25 * terrain.extent
    return vm.VehicleState(*rng.uniform(-half, half, 2), rng.uniform(-np.pi, np.pi), 2.0, 0.0, 0.0)


def drive_and_log(terrain, controller=None, duration=60.0, seed=0, dt=vm.DT, start=None):
    """Simulate the true dynamics under ``controller`` and record a log of ``duration/dt`` rows."""
    controllers = None if controller is None else [controller]
    starts = None if start is None else [start]
    return drive_many(terrain, [seed], duration, dt, controllers, starts)[0]


def drive_many(terrain, seeds, duration=60.0, dt=vm.DT, controllers=None, starts=None):
    """Drive one vehicle per seed simultaneously (vectorized dynamics); one log each.

    Each vehicle's log is identical to driving it alone.
    """
    if duration < 0:
        raise ValueError("duration must be non-negative")
    seeds = list(seeds)
    k_veh = len(seeds)
    n = int(round(duration / dt))
    controllers = controllers or [ScriptedDriver(seed=s, extent=terrain.extent, dt=dt) for s in seeds]
    starts = starts or [_start_state(terrain, s) for s in seeds]
    x = np.array([[float(v) for v in st] for st in starts])
    a = np.tile([0.0, 0.0, 0.0, float(terrain.params.rpm_idle)], (k_veh, 1))
    offsets = wheel_offsets(terrain.params)
    states, acts, ctrls = np.zeros((k_veh, n, 6)), np.zeros((k_veh, n, 4)), np.zeros((k_veh, n, 3))
    wheels, normals = np.zeros((k_veh, n, 4, 2)), np.zeros((k_veh, n, 4, 3))
    for k in range(n):
        u = np.array([[float(v) for v in ctl(vm.VehicleState(*x[i]))] for i, ctl in enumerate(controllers)])
        wp = wheel_positions(x[:, 0], x[:, 1], x[:, 2], offsets)
        states[:, k], acts[:, k], ctrls[:, k], wheels[:, k] = x, a, u, wp
        normals[:, k] = to_body_frame(terrain.normal_world(wp), x[:, 2])
        state, act = true_dynamics_step(vm.VehicleState(*x.T), vm.ActuatorState(*a.T),
                                        vm.ControlInput(*u.T), terrain, dt)
        x = np.stack([np.broadcast_to(v, (k_veh,)) for v in state], axis=1).astype(np.float64)
        a = np.stack([np.broadcast_to(v, (k_veh,)) for v in act], axis=1).astype(np.float64)
    return [DrivingLog(dt, s, states[i], acts[i], ctrls[i], wheels[i], normals[i])
            for i, s in enumerate(seeds)]


# --- dataset extraction -------------------------------------------------------------

@dataclass
class TrajectoryDataset:
    """Chunks of driving logs for 5 s prediction.

    Per-row arrays are concatenated over logs; a sample is a start row.
    Sample ``k`` uses ``history`` rows from ``starts[k]`` for warm-up, starts
    prediction at row ``starts[k] + history`` and is scored on the following
    ``horizon`` rows.
    """

    states: np.ndarray       # (R, 6)
    actuators: np.ndarray    # (R, 4)
    controls: np.ndarray     # (R, 3)
    normals: np.ndarray      # (R, 4, 3)
    features: np.ndarray     # (R, 8, 4, n_pca) float16
    validity: np.ndarray     # (R, 8, 4) int8 in {-1, +1}
    segment: np.ndarray      # (R,) global segment id
    starts: np.ndarray       # (N,) sample start rows
    split: np.ndarray        # (N,) 0 train, 1 test
    history: int = 10
    horizon: int = 250
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.starts)

    @property
    def n_pca(self):
        return self.features.shape[-1]

    def subset(self, which):
        """View restricted to 'train' or 'test' samples (row arrays are shared)."""
        code = {"train": 0, "test": 1}[which]
        keep = self.split == code
        return TrajectoryDataset(self.states, self.actuators, self.controls, self.normals,
                                 self.features, self.validity, self.segment, self.starts[keep],
                                 self.split[keep], self.history, self.horizon, dict(self.meta))

    def take(self, n):
        return TrajectoryDataset(self.states, self.actuators, self.controls, self.normals,
                                 self.features, self.validity, self.segment, self.starts[:n],
                                 self.split[:n], self.history, self.horizon, dict(self.meta))

    def window(self, idx):
        """Row indices (len(idx), history + horizon + 1) of the given samples."""
        span = self.history + self.horizon + 1
        return self.starts[np.asarray(idx)][:, None] + np.arange(span)

    def segments_of(self, which):
        sub = self.subset(which)
        return set(np.unique(self.segment[sub.starts]).tolist())

    def save(self, directory):
        from pathlib import Path
        import json
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        arrays = {"states": self.states, "actuators": self.actuators, "controls": self.controls,
                  "normals": self.normals, "features": self.features, "validity": self.validity,
                  "segment": self.segment, "starts": self.starts, "split": self.split}
        binio.write(d / "shard_000.bin", "trajectory_dataset", arrays,
                    {"history": self.history, "horizon": self.horizon})
        manifest = dict(self.meta)
        manifest.update({"shards": ["shard_000.bin"], "n_samples": int(len(self)),
                         "n_train": int(np.sum(self.split == 0)), "n_test": int(np.sum(self.split == 1)),
                         "history": self.history, "horizon": self.horizon,
                         "buckets": list(BUCKET_NAMES), "n_pca": int(self.n_pca)})
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        from pathlib import Path
        import json
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        parts = [binio.read(d / name, expect_kind="trajectory_dataset") for name in manifest["shards"]]
        if len(parts) != 1:
            raise NotImplementedError("multi-shard datasets")
        _, _, meta, a = parts[0]
        return cls(a["states"], a["actuators"], a["controls"], a["normals"], a["features"],
                   a["validity"], a["segment"], a["starts"], a["split"], meta["history"],
                   meta["horizon"], manifest)


def chunk_starts(n_rows, history, horizon, stride):
    """Start rows of every full chunk (history + horizon + 1 rows) in a run of ``n_rows``."""
    last = n_rows - (history + horizon + 1)
    if last < 0:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, last + 1, stride, dtype=np.int64)


def extract_dataset(logs, terrain, basis, horizon=HORIZON_S, stride=1.0, tau=TAU_S,
                    segment_s=50.0, test_every=5):
    """Split logs into contiguous segments, assign whole segments to train or test, and chunk.

    Every row carries PCA features from all eight buckets (hindsight first).
    """
    if isinstance(logs, DrivingLog):
        logs = [logs]
    dt = logs[0].dt
    h, hist, step = int(round(horizon / dt)), int(round(tau / dt)), int(round(stride / dt))
    seg_rows = int(round(segment_s / dt))
    cols = {k: [] for k in ("states", "actuators", "controls", "normals", "features", "validity", "segment")}
    starts, split = [], []
    offset, seg_id = 0, 0
    for log in logs:
        feats, valid = [], []
        for b in range(N_BUCKETS):
            f, v = log.features(terrain, basis, b)
            feats.append(f.astype(np.float16))
            valid.append(np.where(v, 1, -1).astype(np.int8))
        feats = np.stack(feats, axis=1)
        valid = np.stack(valid, axis=1)
        n = len(log)
        seg = np.zeros(n, dtype=np.int64)
        for s0 in range(0, n, seg_rows):
            s1 = min(n, s0 + seg_rows)
            seg[s0:s1] = seg_id
            local = chunk_starts(s1 - s0, hist, h, step) + s0
            starts.extend((local + offset).tolist())
            split.extend([1 if seg_id % test_every == test_every - 1 else 0] * len(local))
            seg_id += 1
        for key, arr in (("states", log.states), ("actuators", log.actuators), ("controls", log.controls),
                         ("normals", log.normals), ("features", feats), ("validity", valid), ("segment", seg)):
            cols[key].append(arr)
        offset += n
    cat = {k: np.concatenate(v, axis=0) for k, v in cols.items()}
    meta = {"dt": dt, "stride_s": stride, "segment_s": segment_s, "test_every": test_every,
            "log_seeds": [int(log.seed) for log in logs]}
    return TrajectoryDataset(cat["states"], cat["actuators"], cat["controls"], cat["normals"],
                             cat["features"], cat["validity"], cat["segment"],
                             np.asarray(starts, dtype=np.int64), np.asarray(split, dtype=np.int8),
                             hist, h, meta)


def pca_samples(terrain, n=4000, seed=0, buckets=(HINDSIGHT, 3)):
    """Raw features at random ground locations for fitting the PCA basis.

    Defaults to near-range views (hindsight and 0 m) so the basis reflects
    terrain content rather than long-range distortion.
    """
    rng = np.random.default_rng([seed, 5])
    half = terrain.extent / 2
    rows = []
    per = n // len(buckets)
    for b in buckets:
        xy = rng.uniform(-half, half, (per, 2))
        vals, valid = raw_features(terrain, xy, bucket_index(b), seed)
        rows.append(vals[valid])
    return np.concatenate(rows, axis=0)


def world_feature_map(terrain, basis, center, size=60.0, bucket=HINDSIGHT, seed=0, resolution=0.2):
    """Square feature map around ``center`` rasterized at cell centers from one bucket.

    This is what fusing every observation of that bucket would produce; the
    voxel pipeline is not needed when the ground truth is available directly.
    """
    from .mapping import TerrainFeatureMap
    n = int(round(size / resolution))
    origin = np.asarray(center, dtype=np.float64)[:2] - 0.5 * n * resolution
    offs = (np.arange(n) + 0.5) * resolution
    xy = np.stack(np.meshgrid(origin[0] + offs, origin[1] + offs, indexing="ij"), axis=-1).reshape(-1, 2)
    b = bucket_index(bucket)
    feats, valid = projected_features(terrain, xy, b, seed, basis)
    tmap = TerrainFeatureMap.build(origin, resolution, feats.reshape(n, n, -1),
                                   terrain.elevation(xy).reshape(n, n), valid.reshape(n, n),
                                   normal=terrain.normal_world(xy).reshape(n, n, 3))
    return tmap


# --- persistence ------------------------------------------------------------------------

_FEATURE_ARRAYS = ("base", "class_embed", "texture_basis", "noise_basis", "depth_dir", "bucket_offset",
                   "bucket_depth", "bucket_noise", "bucket_confusion", "validity")
_FEATURE_SCALARS = ("confusion_class", "drift_scale", "texture_cell", "noise_cell", "validity_cell", "seed")
_TERRAIN_ARRAYS = ("modifiers", "wave_vec", "wave_phase", "wave_amp", "elev_vec", "elev_phase", "elev_amp")


def terrain_to_bytes(terrain):
    fm = terrain.features
    arrays = {f"terrain.{k}": getattr(terrain, k) for k in _TERRAIN_ARRAYS}
    arrays.update({f"features.{k}": getattr(fm, k) for k in _FEATURE_ARRAYS})
    meta = {"seed": terrain.seed, "extent": terrain.extent, "class_names": list(terrain.class_names),
            "sharpness": terrain.sharpness, "residual_amplitude": terrain.residual_amplitude,
            "params": terrain.params.as_dict(),
            "features": {k: getattr(fm, k) for k in _FEATURE_SCALARS}}
    return binio.dumps("terrain_field", arrays, meta)


def terrain_from_bytes(data):
    _, _, meta, a = binio.loads(data, expect_kind="terrain_field")
    fm = SyntheticFeatureModel(**{k: a[f"features.{k}"] for k in _FEATURE_ARRAYS}, **meta["features"])
    return TerrainField(meta["seed"], meta["extent"], tuple(meta["class_names"]),
                        *(a[f"terrain.{k}"] for k in _TERRAIN_ARRAYS[:4]), meta["sharpness"],
                        *(a[f"terrain.{k}"] for k in _TERRAIN_ARRAYS[4:]), fm,
                        vm.ParamSet(**meta["params"]), meta["residual_amplitude"])

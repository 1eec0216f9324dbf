"""Multistep training and evaluation of hybrid models on trajectory datasets."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import vehicle_model as vm
from .features import FeatureNormalizer
from .hybrid import HybridModel
from .nn import AdamState, Tape, adam_step
from .nn import autograd as ag
from .world import HINDSIGHT, N_BUCKETS, bucket_index

log = logging.getLogger(__name__)

DISTANCE_MODES = ("hindsight", "randomized")
LOSS_WEIGHTS = (1.0, 1.0, 2.0, 1.0, 1.0, 1.0)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    lr_final_scale: float = 0.1      # cosine decay of lr to this fraction by the last batch
    physics_lr_scale: float = 0.1
    loss_weights: tuple = LOSS_WEIGHTS
    feature_mode: str = "none"
    distance_mode: str = "hindsight"
    n_encoder: int = 4
    n_pca: int = 40
    seed: int = 0
    grad_clip: float = 10.0
    truncate_steps: int = 0          # 0 means full backprop through the horizon
    max_batches_per_epoch: int = 0   # 0 means every batch
    horizon_steps: int = 0           # 0 means the dataset horizon

    def __post_init__(self):
        if self.distance_mode not in DISTANCE_MODES:
            raise ValueError(f"distance_mode must be one of {DISTANCE_MODES}")
        if self.feature_mode not in ("none", "direct", "compressed"):
            raise ValueError("feature_mode must be none, direct or compressed")
        if len(self.loss_weights) != 6:
            raise ValueError("loss_weights needs one weight per state component")
        if not 0.0 < self.lr_final_scale <= 1.0:
            raise ValueError("lr_final_scale must be in (0, 1]")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    def as_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


@dataclass
class TrainResult:
    model: HybridModel
    epoch_losses: list
    batch_losses: list
    seconds: float
    config: TrainingConfig
    bucket_draws: list = field(default_factory=list)

    def metrics_text(self):
        lines = ["epoch loss"]
        lines += [f"{i + 1} {v:.6f}" for i, v in enumerate(self.epoch_losses)]
        return "\n".join(lines) + "\n"


# --- loss ------------------------------------------------------------------------------

def trajectory_loss(predicted, target, weights=LOSS_WEIGHTS):
    """Weighted squared error summed over steps and components, averaged over the batch.

    ``predicted`` is a dict of (B, T) series keyed by state field or an array
    (B, T, 6); ``target`` is an array (B, T, 6). Yaw differences are wrapped.
    """
    if not isinstance(predicted, dict):
        arr = predicted
        predicted = {k: arr[..., i] for i, k in enumerate(vm.STATE_FIELDS)}
    target = np.asarray(target, dtype=np.float64)
    if np.shape(ag.value_of(predicted["p_x"])) != target.shape[:-1]:
        raise ValueError("predicted and target trajectories differ in length")
    total = 0.0
    for i, (key, w) in enumerate(zip(vm.STATE_FIELDS, weights)):
        d = predicted[key] - target[..., i]
        if key == "phi":
            d = ag.wrap_angle(d)
        total = total + w * ag.sum(ag.square(d))
    batch = target.shape[0] if target.ndim == 3 else 1
    return total / batch


# --- batches -----------------------------------------------------------------------------

@dataclass
class Batch:
    history: np.ndarray    # (B, n_hist + 1, 13)
    start: np.ndarray      # (B, 6)
    actuators: np.ndarray  # (B, 4)
    controls: np.ndarray   # (B, H, 3)
    normals: np.ndarray    # (B, H, 3) wheel-averaged body frame
    features: np.ndarray | None   # (B, H, 4, n_pca)
    validity: np.ndarray | None   # (B, H, 4)
    target: np.ndarray     # (B, H, 6)
    buckets: np.ndarray    # (B,)


def make_batch(model, ds, idx, buckets, horizon_steps=0):
    """Gather the windows of samples ``idx``; features come from one bucket per sample."""
    idx = np.asarray(idx)
    hist = model.history_steps
    if hist != ds.history:
        raise ValueError(f"model history {hist} steps, dataset history {ds.history} steps")
    horizon = horizon_steps or ds.horizon
    rows = ds.window(idx)
    past = rows[:, :hist + 1]
    navg = ds.normals[past].mean(axis=2)
    navg /= np.linalg.norm(navg, axis=-1, keepdims=True)
    history = HybridModel.history_rows(ds.states[past], ds.actuators[past], ds.controls[past], navg)
    steps = rows[:, hist:hist + horizon]
    normals = ds.normals[steps].mean(axis=2)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    buckets = np.broadcast_to(np.asarray(buckets), idx.shape)
    feats = valid = None
    if model.feature_mode != "none":
        feats = ds.features[steps, buckets[:, None], :, :model.n_pca].astype(np.float64)
        valid = ds.validity[steps, buckets[:, None]].astype(np.float64)
    start_row = rows[:, hist]
    return Batch(history, ds.states[start_row], ds.actuators[start_row], ds.controls[steps],
                 normals, feats, valid, ds.states[rows[:, hist + 1:hist + 1 + horizon]],
                 np.asarray(buckets))


def predict_batch(model, batch, truncate_steps=0):
    """Teacher-forced rollout of a batch; returns a dict of (B, H) series."""
    h, c = model.init_hidden(batch.history)
    feats = None
    if model.feature_mode != "none":
        x = model.feature_inputs(batch.features, batch.validity)
        shape = np.shape(ag.value_of(x))
        feats = ag.reshape(x, shape[:-2] + (shape[-2] * shape[-1],))
    return model.rollout_teacher_forced(batch.start, batch.actuators, batch.controls,
                                        batch.normals, feats, (h, c), truncate_steps)


# --- data statistics ------------------------------------------------------------------------

def _train_rows(ds):
    rows = np.unique(ds.window(np.arange(len(ds))).ravel())
    return rows


def fit_statistics(model, ds, distance_mode="hindsight"):
    """Set the model's fixed input normalization from training rows."""
    rows = _train_rows(ds)
    dyn = np.concatenate([ds.states[rows, 3:6], ds.actuators[rows], ds.controls[rows]], axis=1)
    model.dyn_mean = dyn.mean(axis=0)
    model.dyn_scale = np.maximum(dyn.std(axis=0), 1e-3)
    P = model.params
    st = ds.states[rows]
    navg = ds.normals[rows].mean(axis=1)
    navg /= np.linalg.norm(navg, axis=-1, keepdims=True)
    forces = vm.compute_forces(vm.VehicleState(*st.T), vm.ActuatorState(*ds.actuators[rows].T),
                               vm.ControlInput(*ds.controls[rows].T), vm.SurfaceNormal(*navg.T), P)
    model.force_scale = np.maximum(np.array([np.std(f) for f in forces]), 50.0)
    if model.feature_mode != "none":
        buckets = [HINDSIGHT] if distance_mode == "hindsight" else list(range(N_BUCKETS))
        vals = ds.features[rows][:, buckets, :, :model.n_pca].astype(np.float64)
        valid = ds.validity[rows][:, buckets]
        model.normalizer = FeatureNormalizer.fit(vals, valid)


def fit_actuators(model, ds):
    """Stage 1: least-squares fit of the actuator delay constants, then frozen."""
    rows = _train_rows(ds)
    # only transitions inside one contiguous run of one log
    keep = (np.diff(rows) == 1) & (ds.segment[rows[:-1]] == ds.segment[rows[1:]])
    fitted = vm.fit_actuator_models(ds.actuators[rows], ds.controls[rows], ds.states[rows, 3],
                                    model.physics.base, model.dt, transitions=keep)
    model.physics.rebase(fitted)
    return fitted


# --- training --------------------------------------------------------------------------------

def draw_buckets(rng, n, distance_mode):
    if distance_mode == "hindsight":
        return np.full(n, HINDSIGHT, dtype=np.int64)
    return rng.integers(0, N_BUCKETS, n)


def build_model(cfg, params=None, ds=None):
    n_pca = cfg.n_pca if ds is None else min(cfg.n_pca, ds.n_pca)
    return HybridModel(params, cfg.feature_mode, n_pca=n_pca, n_encoder=cfg.n_encoder, seed=cfg.seed)


def cosine_lr(lr, final_scale, frac):
    """Learning rate after fraction ``frac`` of training: ``lr`` at 0, ``lr * final_scale`` at 1."""
    return lr * (final_scale + (1.0 - final_scale) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def train(ds, cfg: TrainingConfig, model=None, params=None, callback=None):
    """Fit actuators, then jointly train constants and networks with Adam through full rollouts."""
    train_ds = ds.subset("train") if np.any(ds.split == 1) else ds
    if len(train_ds) == 0:
        raise ValueError("dataset has no training samples")
    model = model or build_model(cfg, params, train_ds)
    if cfg.feature_mode != model.feature_mode:
        raise ValueError("config and model feature modes differ")
    t0 = time.perf_counter()
    fit_actuators(model, train_ds)
    fit_statistics(model, train_ds, cfg.distance_mode)
    params = model.parameters()
    names = list(model.named_parameters())
    opt = AdamState(lr=cfg.lr, lr_scale=[cfg.physics_lr_scale if n.startswith("physics.") else 1.0
                                         for n in names])
    rng = np.random.default_rng([cfg.seed, 17])
    epoch_losses, batch_losses, draws = [], [], []
    n = len(train_ds)
    per_epoch = -(-n // cfg.batch_size)
    if cfg.max_batches_per_epoch:
        per_epoch = min(per_epoch, cfg.max_batches_per_epoch)
    total = max(cfg.epochs * per_epoch - 1, 1)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)][:per_epoch]
        losses = []
        for idx in batches:
            opt.lr = cosine_lr(cfg.lr, cfg.lr_final_scale, len(batch_losses) / total)
            buckets = draw_buckets(rng, len(idx), cfg.distance_mode)
            draws.append(buckets)
            batch = make_batch(model, train_ds, idx, buckets, cfg.horizon_steps)
            with Tape() as tape:
                pred = predict_batch(model, batch, cfg.truncate_steps)
                loss = trajectory_loss(pred, batch.target, cfg.loss_weights)
                value = float(loss.value)
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"loss became {value} at epoch {epoch + 1} batch {len(losses) + 1}; "
                        f"last finite loss {losses[-1] if losses else 'none'}")
                tape.backward(loss)
                grads = [tape.gradient(p) for p in params]
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if cfg.grad_clip and norm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / norm) for g in grads]
            adam_step(opt, params, grads)
            losses.append(value)
            batch_losses.append(value)
        epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch + 1, epoch_losses[-1])
        if callback:
            callback(epoch, epoch_losses[-1], model)
    return TrainResult(model, epoch_losses, batch_losses, time.perf_counter() - t0, cfg, draws)


# --- evaluation ----------------------------------------------------------------------------

@dataclass
class EvalReport:
    errors: np.ndarray            # (N,) endpoint distance error, m
    state_errors: np.ndarray      # (N, 6) absolute endpoint error per state
    label: str = ""
    bucket: str = "hindsight"

    @property
    def n(self):
        return len(self.errors)

    @property
    def mean(self):
        return float(np.mean(self.errors))

    @property
    def median(self):
        return float(np.median(self.errors))

    @property
    def quartiles(self):
        q1, q3 = np.percentile(self.errors, [25, 75])
        return float(q1), float(q3)

    @property
    def whiskers(self):
        """Most extreme errors within 1.5 IQR of the quartiles."""
        q1, q3 = self.quartiles
        iqr = q3 - q1
        inside = self.errors[(self.errors >= q1 - 1.5 * iqr) & (self.errors <= q3 + 1.5 * iqr)]
        return float(inside.min()), float(inside.max())

    @property
    def vx_mean(self):
        return float(np.mean(self.state_errors[:, 3]))

    def summary(self):
        q1, q3 = self.quartiles
        lo, hi = self.whiskers
        return {"label": self.label, "bucket": self.bucket, "n": self.n, "mean": self.mean,
                "median": self.median, "q1": q1, "q3": q3, "whisker_low": lo, "whisker_high": hi,
                "vx_mean": self.vx_mean}


def evaluate(model, ds, bucket="hindsight", batch_size=128, label="", horizon_steps=0):
    """Endpoint errors of teacher-forced rollouts on the test split with features from one bucket."""
    test = ds.subset("test") if np.any(ds.split == 1) else ds
    b = bucket_index(bucket)
    errs, state_errs = [], []
    for i in range(0, len(test), batch_size):
        idx = np.arange(i, min(i + batch_size, len(test)))
        batch = make_batch(model, test, idx, b, horizon_steps)
        pred = predict_batch(model, batch)
        end = np.stack([np.asarray(ag.value_of(pred[k]))[:, -1] for k in vm.STATE_FIELDS], axis=1)
        truth = batch.target[:, -1]
        errs.append(np.hypot(end[:, 0] - truth[:, 0], end[:, 1] - truth[:, 1]))
        diff = np.abs(end - truth)
        diff[:, 2] = np.abs(ag.wrap_angle(end[:, 2] - truth[:, 2]))
        state_errs.append(diff)
    from .world import BUCKET_NAMES
    return EvalReport(np.concatenate(errs), np.concatenate(state_errs), label, BUCKET_NAMES[b])


def format_reports(reports):
    """Plain-text comparison table."""
    head = f"{'model':<16}{'bucket':<11}{'n':>6}{'mean':>9}{'median':>9}{'q1':>8}{'q3':>8}{'vx':>8}"
    lines = [head]
    for r in reports:
        s = r.summary()
        lines.append(f"{s['label']:<16}{s['bucket']:<11}{s['n']:>6}{s['mean']:>9.3f}{s['median']:>9.3f}"
                     f"{s['q1']:>8.3f}{s['q3']:>8.3f}{s['vx_mean']:>8.3f}")
    return "\n".join(lines) + "\n"


def _train_and_evaluate(job):
    ds, cfg, label = job
    return evaluate(train(ds, cfg).model, ds, label=label)


def ablation_sweep(ds, axis, values, base=None, include_baseline=True, workers=1):
    """Train and evaluate compressed models along ``axis`` ('compression_size' or 'n_pca').

    With ``workers > 1`` the independent runs go to a process pool; results
    keep the job order, so the output does not depend on the worker count.
    """
    base = base or TrainingConfig(feature_mode="compressed")
    if axis not in ("compression_size", "n_pca"):
        raise ValueError("axis must be compression_size or n_pca")
    key = "n_encoder" if axis == "compression_size" else "n_pca"
    jobs = []
    if include_baseline:
        jobs.append((ds, TrainingConfig(**{**base.as_dict(), "feature_mode": "none"}), "B"))
    for v in values:
        cfg = TrainingConfig(**{**base.as_dict(), key: int(v), "feature_mode": "compressed"})
        jobs.append((ds, cfg, f"C {key}={v}"))
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_and_evaluate, jobs))
    return [_train_and_evaluate(job) for job in jobs]

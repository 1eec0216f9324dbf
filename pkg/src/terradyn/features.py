"""PCA compression of visual features and the per-wheel feature encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Mlp, Module
from .nn import autograd as ag

N_VFM = 384
N_PCA = 40
N_ENCODER = 4
ENCODER_HIDDEN = (64, 32)
WHEEL_ORDER = ("FL", "FR", "RL", "RR")
MISSING, OBSERVED = -1.0, 1.0


class RankError(ValueError):
    def __init__(self, rank, wanted):
        super().__init__(f"samples have rank {rank}, fewer than the {wanted} components requested")
        self.rank = rank


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    validity: float = OBSERVED

    @classmethod
    def missing(cls, dim, fill=None):
        vals = np.zeros(dim) if fill is None else np.asarray(fill, dtype=np.float64)
        return cls(vals, MISSING)

    @property
    def is_valid(self):
        return self.validity > 0


@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray                # (n_vfm,)
    components: np.ndarray          # (n_pca, n_vfm), orthonormal rows
    explained_variance: np.ndarray  # (n_pca,)

    @property
    def n_vfm(self):
        return self.components.shape[1]

    @property
    def n_pca(self):
        return self.components.shape[0]

    def truncate(self, n):
        """Leading ``n`` components (the bases are nested)."""
        if not 1 <= n <= self.n_pca:
            raise ValueError(f"cannot truncate {self.n_pca} components to {n}")
        return PcaBasis(self.mean, self.components[:n], self.explained_variance[:n])

    def arrays(self):
        return {"pca.mean": self.mean, "pca.components": self.components,
                "pca.explained_variance": self.explained_variance}

    @classmethod
    def from_arrays(cls, arrays):
        return cls(arrays["pca.mean"], arrays["pca.components"], arrays["pca.explained_variance"])


def pca_fit(samples, n_pca=N_PCA, rtol=1e-10):
    """Principal components of ``samples`` (rows are feature vectors)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > rtol * max(s[0], 1e-300))) if s.size else 0
    if rank < n_pca:
        raise RankError(rank, n_pca)
    comps = vt[:n_pca]
    # fix each component's sign so the largest-magnitude entry is positive
    pivot = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(n_pca), pivot])[:, None]
    variance = s[:n_pca] ** 2 / max(len(x) - 1, 1)
    return PcaBasis(mean, comps, variance)


def pca_project(basis, feature):
    """Coordinates of ``feature`` (..., n_vfm) in the basis, shape (..., n_pca)."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape[-1] != basis.n_vfm:
        raise ValueError(f"feature has {f.shape[-1]} dims, basis expects {basis.n_vfm}")
    return (f - basis.mean) @ basis.components.T


def pca_reconstruct(basis, coords):
    return np.asarray(coords) @ basis.components + basis.mean


def explained_variance_ratio(samples, basis):
    """Cumulative fraction of total variance captured by the leading components."""
    total = np.var(np.asarray(samples, dtype=np.float64), axis=0, ddof=1).sum()
    return np.cumsum(basis.explained_variance) / total


# --- encoder inputs ------------------------------------------------------------

@dataclass(frozen=True)
class FeatureNormalizer:
    """Frozen training mean and per-dimension scale applied to PCA features."""

    mean: np.ndarray
    scale: np.ndarray

    @property
    def dim(self):
        return len(self.mean)

    @classmethod
    def fit(cls, values, validity):
        """Mean and spread over valid rows of ``values`` (..., n) with ``validity`` (...)."""
        vals = np.asarray(values, dtype=np.float64).reshape(-1, np.shape(values)[-1])
        ok = np.asarray(validity).reshape(-1) > 0
        if not ok.any():
            raise ValueError("no valid features to fit normalization")
        vals = vals[ok]
        return cls(vals.mean(axis=0), np.maximum(vals.std(axis=0), 1e-6))

    def truncate(self, n):
        return FeatureNormalizer(self.mean[:n], self.scale[:n])

    def inputs(self, values, validity):
        """Per-wheel network input: normalized features (mean for missing) plus the flag.

        ``values`` (..., n) and ``validity`` (...) give (..., n + 1).
        """
        vals = np.asarray(values, dtype=np.float64)
        flag = np.where(np.asarray(validity) > 0, OBSERVED, MISSING)
        norm = (vals - self.mean) / self.scale
        norm = np.where(flag[..., None] > 0, norm, 0.0)
        return np.concatenate([norm, flag[..., None]], axis=-1)


class FeatureEncoder(Module):
    """Dense encoder ``[n_pca + 1 -> 64 -> 32 -> n_encoder]`` applied to each wheel."""

    def __init__(self, n_pca=N_PCA, n_encoder=N_ENCODER, rng=None, hidden=ENCODER_HIDDEN):
        self.net = Mlp([n_pca + 1, *hidden, n_encoder], rng=rng)

    @property
    def n_pca(self):
        return self.net.sizes[0] - 1

    @property
    def n_encoder(self):
        return self.net.sizes[-1]

    def __call__(self, wheel_inputs):
        """(..., 4, n_pca + 1) network inputs to (..., 4 * n_encoder) codes."""
        codes = self.net(wheel_inputs)
        shape = np.shape(ag.value_of(codes))
        return ag.reshape(codes, shape[:-2] + (shape[-2] * shape[-1],))


def encode(encoder, per_wheel_features, normalizer):
    """Encode four :class:`FeatureVector` objects (FL, FR, RL, RR) into one code vector."""
    if len(per_wheel_features) != len(WHEEL_ORDER):
        raise ValueError("expected one feature vector per wheel")
    vals = np.stack([fv.values for fv in per_wheel_features])
    valid = np.array([fv.validity for fv in per_wheel_features])
    return np.asarray(ag.value_of(encoder(normalizer.inputs(vals, valid))))

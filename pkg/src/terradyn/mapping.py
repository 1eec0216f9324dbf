"""Robot-centric voxel map of feature-augmented points and its 2D flattening.

Voxels are addressed by integer indices on a fixed world grid, so moving
the map window (``recenter``) only drops voxels that leave the window and
never resamples stored data.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .features import MISSING, OBSERVED

RESOLUTION = 0.2
FILL_RADIUS = 0.4
DEFAULT_EXTENT = (100.0, 100.0, 10.0)

INVALID, DIRECT, FILLED = 0, 1, 2


@dataclass
class FeaturePoint:
    position: np.ndarray
    feature: np.ndarray
    observation_distance: float

    def __post_init__(self):
        if not self.observation_distance >= 0:
            raise ValueError("observation_distance must be non-negative")


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``rotation`` maps camera axes (x right, y down, z forward) to world."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 960
    height: int = 594
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    patch: int = 14

    @property
    def grid_shape(self):
        """(rows, cols) of the patch-feature grid."""
        return self.height // self.patch, self.width // self.patch


def project_points_to_image(points, camera, feature_image, robot_position=None):
    """Attach to each visible point the feature of the patch it projects into.

    ``feature_image`` is (rows, cols, d). Points behind the camera or outside
    the patch grid are dropped. Observation distance is the horizontal range
    from ``robot_position`` (camera position if omitted).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    feat = np.asarray(feature_image)
    rows, cols = feat.shape[:2]
    cam = (pts - camera.position) @ np.asarray(camera.rotation)
    z = cam[:, 2]
    in_front = z > 1e-9
    safe_z = np.where(in_front, z, 1.0)
    u = camera.fx * cam[:, 0] / safe_z + camera.cx
    v = camera.fy * cam[:, 1] / safe_z + camera.cy
    col = np.floor(u / camera.patch).astype(np.int64)
    row = np.floor(v / camera.patch).astype(np.int64)
    keep = (in_front & (u >= 0) & (v >= 0) & (u < camera.width) & (v < camera.height)
            & (col >= 0) & (col < cols) & (row >= 0) & (row < rows))
    origin = camera.position if robot_position is None else np.asarray(robot_position, dtype=np.float64)
    out = []
    for k in np.flatnonzero(keep):
        dist = float(np.hypot(*(pts[k, :2] - origin[:2])))
        out.append(FeaturePoint(pts[k].copy(), feat[row[k], col[k]].astype(np.float64), dist))
    return out


class VoxelMap:
    """Closest-observation voxel store over a window of the world grid."""

    def __init__(self, center=(0.0, 0.0, 0.0), extent=DEFAULT_EXTENT, resolution=RESOLUTION,
                 feature_dim=1):
        self.resolution = float(resolution)
        self.shape = tuple(int(round(e / self.resolution)) for e in extent)
        self.feature_dim = int(feature_dim)
        self.dropped = 0
        self._cells = {}  # (i, j, k) world-grid index -> (distance, feature)
        self._set_center(center)

    def _set_center(self, center):
        c = np.asarray(center, dtype=np.float64)
        half = np.array(self.shape) // 2
        self.lower = np.floor(c / self.resolution).astype(np.int64) - half
        self.origin = self.lower * self.resolution

    @property
    def center(self):
        return (self.lower + np.array(self.shape) // 2) * self.resolution

    def __len__(self):
        return len(self._cells)

    def __eq__(self, other):
        if not isinstance(other, VoxelMap) or set(self._cells) != set(other._cells):
            return False
        return all(self._cells[k][0] == other._cells[k][0]
                   and np.array_equal(self._cells[k][1], other._cells[k][1]) for k in self._cells)

    def snapshot(self):
        return copy.deepcopy(self)

    def index_of(self, position):
        return tuple(int(v) for v in np.floor(np.asarray(position) / self.resolution).astype(np.int64))

    def _in_window(self, idx):
        rel = np.asarray(idx) - self.lower
        return bool(np.all(rel >= 0) and np.all(rel < self.shape))

    def get(self, idx):
        return self._cells.get(tuple(idx))

    def insert_points(self, points):
        """Fuse points; a voxel takes an observation only if it is strictly closer."""
        for pt in points:
            feat = np.asarray(pt.feature, dtype=np.float64)
            if feat.shape != (self.feature_dim,):
                raise ValueError(f"feature dim {feat.shape} != {self.feature_dim}")
            idx = self.index_of(pt.position)
            if not self._in_window(idx):
                self.dropped += 1
                continue
            held = self._cells.get(idx)
            if held is None or pt.observation_distance < held[0]:
                self._cells[idx] = (float(pt.observation_distance), feat.copy())
        return self

    def recenter(self, center):
        """Scroll the window; voxels that fall outside are forgotten."""
        self._set_center(center)
        self._cells = {k: v for k, v in self._cells.items() if self._in_window(k)}
        return self

    def flatten(self):
        """Lowest valid voxel of every column, as a :class:`TerrainFeatureMap`."""
        nx, ny, _ = self.shape
        feature = np.zeros((nx, ny, self.feature_dim))
        elevation = np.zeros((nx, ny))
        valid = np.zeros((nx, ny), dtype=bool)
        lowest = {}
        for (i, j, k) in self._cells:
            key = (i, j)
            if key not in lowest or k < lowest[key]:
                lowest[key] = k
        for (i, j), k in lowest.items():
            a, b = i - self.lower[0], j - self.lower[1]
            feature[a, b] = self._cells[(i, j, k)][1]
            elevation[a, b] = (k + 0.5) * self.resolution
            valid[a, b] = True
        return TerrainFeatureMap.build(self.origin[:2], self.resolution, feature, elevation, valid)

    def to_bytes(self):
        keys = sorted(self._cells)
        arrays = {
            "index": np.array(keys, dtype=np.int64).reshape(-1, 3),
            "distance": np.array([self._cells[k][0] for k in keys], dtype=np.float64),
            "feature": np.array([self._cells[k][1] for k in keys], dtype=np.float64).reshape(-1, self.feature_dim),
        }
        meta = {"lower": self.lower.tolist(), "shape": list(self.shape),
                "resolution": self.resolution, "feature_dim": self.feature_dim, "dropped": self.dropped}
        return binio.dumps("voxel_map", arrays, meta)

    @classmethod
    def from_bytes(cls, data):
        _, _, meta, arrays = binio.loads(data, expect_kind="voxel_map")
        vm = cls.__new__(cls)
        vm.resolution = meta["resolution"]
        vm.shape = tuple(meta["shape"])
        vm.feature_dim = meta["feature_dim"]
        vm.dropped = meta["dropped"]
        vm.lower = np.array(meta["lower"], dtype=np.int64)
        vm.origin = vm.lower * vm.resolution
        vm._cells = {tuple(int(v) for v in idx): (float(d), f.copy())
                     for idx, d, f in zip(arrays["index"], arrays["distance"], arrays["feature"])}
        return vm


def insert_points(voxel_map, points):
    return voxel_map.insert_points(points)


def flatten(voxel_map):
    return voxel_map.flatten()


# --- 2D terrain feature map ------------------------------------------------------

@dataclass
class MapQueryResult:
    feature: np.ndarray    # (..., d)
    validity: np.ndarray   # (...) in {-1, +1}
    elevation: np.ndarray  # (...)
    normal: np.ndarray     # (..., 3) world frame


@dataclass
class TerrainFeatureMap:
    """Grid of per-cell feature, elevation, world-frame normal and validity.

    Cell ``(i, j)`` covers ``[x0 + i*res, x0 + (i+1)*res) x [y0 + j*res, ...)``.
    """

    origin: np.ndarray
    resolution: float
    feature: np.ndarray
    elevation: np.ndarray
    normal: np.ndarray
    valid: np.ndarray
    provenance: np.ndarray
    source: np.ndarray
    encoded: bool = False
    fill_value: np.ndarray | None = None  # code returned for invalid cells when encoded

    @classmethod
    def build(cls, origin, resolution, feature, elevation, valid, normal=None):
        valid = np.asarray(valid, dtype=bool)
        nx, ny = valid.shape
        if normal is None:
            normal = normals_from_elevation(elevation, valid, resolution)
        source = np.full((nx, ny, 2), -1, dtype=np.int64)
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        source[valid] = np.stack([ii[valid], jj[valid]], axis=-1)
        return cls(np.asarray(origin, dtype=np.float64)[:2].copy(), float(resolution),
                   np.asarray(feature, dtype=np.float64), np.asarray(elevation, dtype=np.float64),
                   np.asarray(normal, dtype=np.float64), valid,
                   np.where(valid, DIRECT, INVALID).astype(np.int8), source)

    @property
    def shape(self):
        return self.valid.shape

    @property
    def feature_dim(self):
        return self.feature.shape[-1]

    def copy(self):
        return copy.deepcopy(self)

    def cell_index(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return np.floor((xy - self.origin) / self.resolution).astype(np.int64)

    def cell_center(self, i, j):
        return self.origin + (np.array([i, j]) + 0.5) * self.resolution

    def query(self, xy):
        """Nearest-cell lookup for positions (..., 2); out-of-bounds or invalid cells are missing."""
        idx = self.cell_index(xy)
        nx, ny = self.shape
        inside = (idx[..., 0] >= 0) & (idx[..., 0] < nx) & (idx[..., 1] >= 0) & (idx[..., 1] < ny)
        i = np.clip(idx[..., 0], 0, nx - 1)
        j = np.clip(idx[..., 1], 0, ny - 1)
        ok = inside & self.valid[i, j]
        if self.encoded and self.fill_value is not None:
            missing_fill = self.fill_value
        else:
            missing_fill = 0.0
        feature = np.where(ok[..., None], self.feature[i, j], missing_fill)
        elevation = np.where(ok, self.elevation[i, j], 0.0)
        normal = np.where(ok[..., None], self.normal[i, j], np.array([0.0, 0.0, 1.0]))
        return MapQueryResult(feature, np.where(ok, OBSERVED, MISSING), elevation, normal)

    def to_bytes(self):
        arrays = {"feature": self.feature, "elevation": self.elevation, "normal": self.normal,
                  "valid": self.valid.astype(np.uint8), "provenance": self.provenance,
                  "source": self.source}
        if self.fill_value is not None:
            arrays["fill_value"] = np.asarray(self.fill_value, dtype=np.float64)
        meta = {"origin": self.origin.tolist(), "resolution": self.resolution, "encoded": self.encoded}
        return binio.dumps("terrain_map", arrays, meta)

    @classmethod
    def from_bytes(cls, data):
        _, _, meta, a = binio.loads(data, expect_kind="terrain_map")
        return cls(np.array(meta["origin"]), meta["resolution"], a["feature"], a["elevation"],
                   a["normal"], a["valid"].astype(bool), a["provenance"], a["source"],
                   meta["encoded"], a.get("fill_value"))

    def debug_text(self, layers=("valid", "provenance", "elevation")):
        """Plain-text dump of 2D layers, one block per layer, rows along x."""
        blocks = []
        for name in layers:
            grid = getattr(self, name)
            fmt = (lambda v: f"{v:.2f}") if grid.dtype.kind == "f" else (lambda v: f"{int(v)}")
            rows = [" ".join(fmt(v) for v in row) for row in grid]
            blocks.append(f"# {name} {grid.shape[0]}x{grid.shape[1]}\n" + "\n".join(rows))
        return "\n\n".join(blocks) + "\n"


def normals_from_elevation(elevation, valid, resolution):
    """Unit normals from central differences, one-sided next to invalid cells."""
    h = np.asarray(elevation, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    grads = []
    for axis in (0, 1):
        fwd = np.zeros_like(h)
        bwd = np.zeros_like(h)
        ok_f = np.zeros_like(valid)
        ok_b = np.zeros_like(valid)
        sl_hi = [slice(None)] * 2
        sl_lo = [slice(None)] * 2
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        diff = (h[tuple(sl_hi)] - h[tuple(sl_lo)]) / resolution
        pair = valid[tuple(sl_hi)] & valid[tuple(sl_lo)]
        fwd[tuple(sl_lo)] = diff
        ok_f[tuple(sl_lo)] = pair
        bwd[tuple(sl_hi)] = diff
        ok_b[tuple(sl_hi)] = pair
        both = ok_f & ok_b
        g = np.where(both, 0.5 * (fwd + bwd), np.where(ok_f, fwd, np.where(ok_b, bwd, 0.0)))
        grads.append(np.where(valid, g, 0.0))
    n = np.stack([-grads[0], -grads[1], np.ones_like(h)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _fill_offsets(resolution, radius):
    reach = int(np.floor(radius / resolution + 1e-9))
    offs = [(di, dj) for di in range(-reach, reach + 1) for dj in range(-reach, reach + 1)
            if (di or dj) and np.hypot(di, dj) * resolution <= radius + 1e-9]
    # nearest first; equal distances resolved in row-major order of the source cell
    return sorted(offs, key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))


def fill_gaps(tmap, radius=FILL_RADIUS):
    """Copy into each invalid cell the record of the nearest direct cell within ``radius``."""
    out = tmap.copy()
    nx, ny = out.shape
    direct = tmap.provenance == DIRECT
    todo = ~tmap.valid
    for di, dj in _fill_offsets(tmap.resolution, radius):
        if not todo.any():
            break
        ti = np.arange(max(0, -di), min(nx, nx - di))
        tj = np.arange(max(0, -dj), min(ny, ny - dj))
        if len(ti) == 0 or len(tj) == 0:
            continue
        TI, TJ = np.meshgrid(ti, tj, indexing="ij")
        SI, SJ = TI + di, TJ + dj
        hit = todo[TI, TJ] & direct[SI, SJ]
        if not hit.any():
            continue
        a, b, sa, sb = TI[hit], TJ[hit], SI[hit], SJ[hit]
        out.feature[a, b] = tmap.feature[sa, sb]
        out.elevation[a, b] = tmap.elevation[sa, sb]
        out.normal[a, b] = tmap.normal[sa, sb]
        out.valid[a, b] = True
        out.provenance[a, b] = FILLED
        out.source[a, b] = np.stack([sa, sb], axis=-1)
        todo[a, b] = False
    return out


def query(tmap, position):
    return tmap.query(position)

"""Voxel front end: 3D gridding, 7-channel augmentation, deterministic VFE
layer evaluation, image-feature fusion and sparse-tensor assembly.

The VFE layer here is inference-only: it evaluates a supplied linear map,
stored batch-norm statistics and ReLU per point, max-pools over the
voxel's valid points and concatenates the pooled vector back onto every
point row (c_in -> c_out with a learned c_in x (c_out/2) matrix).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._grouping import first_seen_groups, integral_cells
from .errors import BadConfig, BadWeights, CoordOutOfGrid
from .geometry3d import _project_all, lidar_to_camera
from .kitti_io import Calibration, PointCloud

RAW_FEATURE_DIM = 7  # x, y, z, r and the three centroid offsets


@dataclass(frozen=True)
class VoxelConfig:
    """Axis ranges, voxel size along (z, y, x) and the per-voxel point cap.

    Every range must be an exact multiple of its voxel size; the grid has
    shape (nd, nh, nw) cells along (z, y, x).  Cells are half-open.
    """

    x_range: tuple[float, float] = (0.0, 70.4)
    y_range: tuple[float, float] = (-40.0, 40.0)
    z_range: tuple[float, float] = (-3.0, 1.0)
    voxel_size: tuple[float, float, float] = (0.4, 0.2, 0.2)  # vz, vy, vx
    max_points_per_voxel: int = 35

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise BadConfig(f"empty range ({lo}, {hi})")
        if self.max_points_per_voxel < 1:
            raise BadConfig("max_points_per_voxel must be >= 1")
        if min(self.grid_shape) < 0:
            raise BadConfig(
                f"voxel grid is not integral: sizes {self.voxel_size} over"
                f" z={self.z_range}, y={self.y_range}, x={self.x_range}"
            )

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        vz, vy, vx = self.voxel_size
        return (
            integral_cells(self.z_range[1] - self.z_range[0], vz),
            integral_cells(self.y_range[1] - self.y_range[0], vy),
            integral_cells(self.x_range[1] - self.x_range[0], vx),
        )


@dataclass(frozen=True)
class VoxelGrid:
    """Sparse occupied voxels with per-point augmented features.

    ``point_features[k, t]`` holds (x, y, z, r, x-v_x, y-v_y, z-v_z) for
    the t-th retained point of voxel k (plus appended image channels
    after fusion); rows past ``counts[k]`` are zero.  ``centroids[k]`` is
    the mean of voxel k's retained raw points.
    """

    voxel_coords: np.ndarray  # (K, 3) int32, (iz, iy, ix)
    point_features: np.ndarray  # (K, T, F) float64
    counts: np.ndarray  # (K,) int32
    centroids: np.ndarray  # (K, 3) float64
    grid_shape: tuple[int, int, int]

    def __post_init__(self):
        for arr in (self.voxel_coords, self.point_features, self.counts, self.centroids):
            arr.setflags(write=False)

    @property
    def num_voxels(self) -> int:
        return self.voxel_coords.shape[0]

    def valid_mask(self) -> np.ndarray:
        t = self.point_features.shape[1]
        return np.arange(t)[None, :] < self.counts[:, None]


def voxelize(pc: PointCloud, cfg: VoxelConfig) -> VoxelGrid:
    """Bucket in-range points into voxels with keep-first capping.

    Voxels appear in first-point-encountered order; offsets are relative
    to the centroid of each voxel's retained points.
    """
    nd, nh, nw = cfg.grid_shape
    cap = cfg.max_points_per_voxel
    pts = pc.points.astype(np.float64)
    x, y, z, r = pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3]

    (x0, x1), (y0, y1), (z0, z1) = cfg.x_range, cfg.y_range, cfg.z_range
    in_range = (
        (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (z >= z0) & (z < z1)
    )
    x, y, z, r = x[in_range], y[in_range], z[in_range], r[in_range]

    vz, vy, vx = cfg.voxel_size
    iz = np.clip(np.floor((z - z0) / vz).astype(np.int64), 0, nd - 1)
    iy = np.clip(np.floor((y - y0) / vy).astype(np.int64), 0, nh - 1)
    ix = np.clip(np.floor((x - x0) / vx).astype(np.int64), 0, nw - 1)
    rank, within, cells = first_seen_groups((iz * nh + iy) * nw + ix)

    keep = within < cap
    k = len(cells)
    vr, vn = rank[keep], within[keep]
    xk, yk, zk, rk = x[keep], y[keep], z[keep], r[keep]

    counts = np.bincount(vr, minlength=k).astype(np.int32)
    cx = np.bincount(vr, weights=xk, minlength=k) / np.maximum(counts, 1)
    cy = np.bincount(vr, weights=yk, minlength=k) / np.maximum(counts, 1)
    cz = np.bincount(vr, weights=zk, minlength=k) / np.maximum(counts, 1)

    coords = np.zeros((k, 3), dtype=np.int32)
    coords[:, 0] = cells // (nh * nw)
    coords[:, 1] = (cells // nw) % nh
    coords[:, 2] = cells % nw

    features = np.zeros((k, cap, RAW_FEATURE_DIM), dtype=np.float64)
    features[vr, vn, 0] = xk
    features[vr, vn, 1] = yk
    features[vr, vn, 2] = zk
    features[vr, vn, 3] = rk
    features[vr, vn, 4] = xk - cx[vr]
    features[vr, vn, 5] = yk - cy[vr]
    features[vr, vn, 6] = zk - cz[vr]

    return VoxelGrid(
        voxel_coords=coords,
        point_features=features,
        counts=counts,
        centroids=np.stack([cx, cy, cz], axis=1),
        grid_shape=(nd, nh, nw),
    )


@dataclass(frozen=True)
class VfeWeights:
    """Inference parameters of one VFE layer.

    ``linear`` maps c_in -> c_out/2; batch-norm is evaluated with the
    stored statistics (no batch statistics are ever computed).
    """

    linear: np.ndarray  # (c_in, c_out/2)
    bias: np.ndarray  # (c_out/2,)
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64)
        if lin.ndim != 2:
            raise BadWeights(f"linear must be 2-D, got shape {lin.shape}")
        half = lin.shape[1]
        vecs = {}
        for name in ("bias", "bn_scale", "bn_shift", "bn_mean", "bn_var"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (half,):
                raise BadWeights(f"{name} must have shape ({half},), got {v.shape}")
            vecs[name] = v
        if vecs["bn_var"].min() < 0.0:
            raise BadWeights("bn_var must be non-negative")
        if not self.epsilon > 0.0:
            raise BadWeights("epsilon must be positive")
        lin.setflags(write=False)
        object.__setattr__(self, "linear", lin)
        for name, v in vecs.items():
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def c_in(self) -> int:
        return self.linear.shape[0]

    @property
    def c_out(self) -> int:
        return 2 * self.linear.shape[1]

    @classmethod
    def identity(cls, c: int, epsilon: float = 1e-12) -> "VfeWeights":
        """Identity linear map and pass-through batch norm (c_out = 2c)."""
        return cls(
            linear=np.eye(c),
            bias=np.zeros(c),
            bn_scale=np.ones(c),
            bn_shift=np.zeros(c),
            bn_mean=np.zeros(c),
            bn_var=np.ones(c),
            epsilon=epsilon,
        )

    @classmethod
    def seeded(cls, c_in: int, c_out: int, seed: int = 0) -> "VfeWeights":
        """Reproducible pseudo-random weights for a c_in -> c_out layer."""
        if c_out % 2 != 0:
            raise BadWeights(f"c_out must be even, got {c_out}")
        half = c_out // 2
        rng = np.random.default_rng(seed)
        return cls(
            linear=rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(c_in, half)),
            bias=np.zeros(half),
            bn_scale=np.ones(half),
            bn_shift=np.zeros(half),
            bn_mean=np.zeros(half),
            bn_var=np.ones(half),
            epsilon=1e-5,
        )


def vfe_layer(features: np.ndarray, counts: np.ndarray, w: VfeWeights) -> np.ndarray:
    """Evaluate one VFE layer on (K, T, c_in) point features.

    Per valid point: h = relu(bn(linear(f))); per voxel the elementwise
    max m of h over valid points; output rows are concat(h, m).  Invalid
    slots stay zero.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[2] != w.c_in:
        raise BadWeights(
            f"features must be (K, T, {w.c_in}), got {features.shape}"
        )
    counts = np.asarray(counts)
    k, t, _ = features.shape
    valid = np.arange(t)[None, :] < counts[:, None]

    h = features @ w.linear + w.bias
    h = (h - w.bn_mean) / np.sqrt(w.bn_var + w.epsilon) * w.bn_scale + w.bn_shift
    h = np.maximum(h, 0.0)
    h[~valid] = 0.0

    pooled = np.where(valid[:, :, None], h, -np.inf).max(axis=1, initial=-np.inf)
    pooled[~np.isfinite(pooled)] = 0.0  # voxels with no valid points

    out = np.concatenate([h, np.broadcast_to(pooled[:, None, :], h.shape)], axis=2)
    out[~valid] = 0.0
    return out


def voxel_pool(features: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Elementwise max over each voxel's valid rows: (K, T, C) -> (K, C)."""
    features = np.asarray(features, dtype=np.float64)
    t = features.shape[1]
    valid = np.arange(t)[None, :] < np.asarray(counts)[:, None]
    pooled = np.where(valid[:, :, None], features, -np.inf).max(axis=1, initial=-np.inf)
    pooled[~np.isfinite(pooled)] = 0.0
    return pooled


def append_image_features(
    vg: VoxelGrid, feat_map: np.ndarray, calib: Calibration
) -> VoxelGrid:
    """Fuse an image feature map onto every valid point (7 -> 7+C channels).

    Each valid point is projected into the image; the feature vector at
    the nearest pixel is appended.  Points behind the camera or off the
    map get zeros, so fusion is total and never alters the raw channels.
    """
    feat_map = np.asarray(feat_map, dtype=np.float64)
    if feat_map.ndim != 3:
        raise BadConfig(f"feature map must be (C, H, W), got {feat_map.shape}")
    c_img, h_img, w_img = feat_map.shape
    k, t, f = vg.point_features.shape

    valid = vg.valid_mask()
    vk, vt = np.nonzero(valid)
    xyz = vg.point_features[vk, vt, :3]

    appended = np.zeros((k, t, c_img), dtype=np.float64)
    if len(vk):
        cam = lidar_to_camera(xyz, calib)
        uvd, in_front = _project_all(cam, calib.p2)
        px = np.full(len(vk), -1, dtype=np.int64)
        py = np.full(len(vk), -1, dtype=np.int64)
        px[in_front] = np.floor(uvd[in_front, 0] + 0.5).astype(np.int64)
        py[in_front] = np.floor(uvd[in_front, 1] + 0.5).astype(np.int64)
        on_map = in_front & (px >= 0) & (px < w_img) & (py >= 0) & (py < h_img)
        sampled = np.zeros((len(vk), c_img), dtype=np.float64)
        sampled[on_map] = feat_map[:, py[on_map], px[on_map]].T
        appended[vk, vt] = sampled

    fused = np.concatenate([vg.point_features, appended], axis=2)
    return VoxelGrid(
        voxel_coords=vg.voxel_coords.copy(),
        point_features=fused,
        counts=vg.counts.copy(),
        centroids=vg.centroids.copy(),
        grid_shape=vg.grid_shape,
    )


@dataclass(frozen=True)
class SparseTensor:
    """Coordinate-list sparse tensor of logical shape (C, D', H', W')."""

    coords: np.ndarray  # (K, 3) int32, (iz, iy, ix)
    values: np.ndarray  # (K, C)
    shape: tuple[int, int, int, int]

    def __post_init__(self):
        self.coords.setflags(write=False)
        self.values.setflags(write=False)

    def densify(self) -> np.ndarray:
        dense = np.zeros(self.shape, dtype=np.float64)
        if len(self.coords):
            dense[:, self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = (
                self.values.T
            )
        return dense


def to_sparse_tensor(vg: VoxelGrid, voxel_features: np.ndarray) -> SparseTensor:
    """Pair per-voxel feature vectors (K, C) with the grid coordinates."""
    values = np.array(voxel_features, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != vg.num_voxels:
        raise BadConfig(
            f"voxel features must be ({vg.num_voxels}, C), got {values.shape}"
        )
    nd, nh, nw = vg.grid_shape
    coords = vg.voxel_coords
    if len(coords) and (
        coords.min() < 0
        or coords[:, 0].max() >= nd
        or coords[:, 1].max() >= nh
        or coords[:, 2].max() >= nw
    ):
        raise CoordOutOfGrid(f"voxel coords outside {nd} x {nh} x {nw} grid")
    return SparseTensor(
        coords=coords.astype(np.int32),
        values=values,
        shape=(values.shape[1], nd, nh, nw),
    )


_SPARSE_HEADER = struct.Struct("<IIIII")


def write_sparse_dump(st: SparseTensor, path) -> None:
    """Binary dump: (K, C, D', H', W') uint32 LE header, the K x 3 uint32
    coordinate list, then K x C float32 values."""
    k = st.coords.shape[0]
    c = st.shape[0]
    with open(path, "wb") as f:
        f.write(_SPARSE_HEADER.pack(k, c, *st.shape[1:]))
        f.write(np.ascontiguousarray(st.coords, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(st.values, dtype="<f4").tobytes())


def read_sparse_dump(path) -> SparseTensor:
    with open(path, "rb") as f:
        k, c, nd, nh, nw = _SPARSE_HEADER.unpack(f.read(_SPARSE_HEADER.size))
        coords = np.frombuffer(f.read(k * 3 * 4), dtype="<u4").reshape(k, 3)
        values = np.frombuffer(f.read(k * c * 4), dtype="<f4").reshape(k, c)
    return SparseTensor(
        coords=coords.astype(np.int32),
        values=values.astype(np.float64),
        shape=(c, nd, nh, nw),
    )

"""Pillar front end: 2D XY gridding, 9-channel point augmentation and the
capped pseudo-image tensor.

Each in-range point is described by 9 channels: its raw (x, y, z, r),
offsets from the centroid of the points retained in its pillar, and the
pillar cell's geometric center (x_g, y_g).  Capping to at most P pillars
and N points per pillar keeps the tensor shape fixed at 9 x P x N.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._grouping import first_seen_groups, integral_cells
from .errors import BadConfig, CoordOutOfGrid
from .kitti_io import PointCloud

FEATURE_DIM = 9


@dataclass(frozen=True)
class PillarConfig:
    """Grid extents, cell size and the (P, N) caps.

    Ranges are half-open ([min, max)) on every axis; range/size must be
    integral so the grid tiles exactly.
    """

    x_range: tuple[float, float] = (0.0, 69.12)
    y_range: tuple[float, float] = (-39.68, 39.68)
    z_range: tuple[float, float] = (-3.0, 1.0)
    pillar_size: tuple[float, float] = (0.16, 0.16)
    max_pillars: int = 12000
    max_points_per_pillar: int = 100

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise BadConfig(f"empty range ({lo}, {hi})")
        if self.max_pillars < 1 or self.max_points_per_pillar < 1:
            raise BadConfig("caps P and N must be >= 1")
        if self.nx < 0 or self.ny < 0:
            raise BadConfig(
                f"pillar grid is not integral: ranges {self.x_range}/{self.y_range}"
                f" with cell {self.pillar_size}"
            )

    @property
    def nx(self) -> int:
        return integral_cells(self.x_range[1] - self.x_range[0], self.pillar_size[0])

    @property
    def ny(self) -> int:
        return integral_cells(self.y_range[1] - self.y_range[0], self.pillar_size[1])

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)


@dataclass(frozen=True)
class PillarTensor:
    """The 9 x P x N pseudo-image plus pillar bookkeeping.

    ``features[:, i, j]`` is the augmented j-th point of pillar i; slots
    past ``counts[i]`` and pillars past ``num_nonempty`` are zero.
    ``pillar_coords[i]`` is the (grid_ix, grid_iy) cell of pillar i.
    """

    features: np.ndarray  # (9, P, N) float32
    pillar_coords: np.ndarray  # (P, 2) int32
    counts: np.ndarray  # (P,) int32
    num_nonempty: int
    grid_shape: tuple[int, int]

    def __post_init__(self):
        for arr in (self.features, self.pillar_coords, self.counts):
            arr.setflags(write=False)


def encode_pillars(pc: PointCloud, cfg: PillarConfig) -> PillarTensor:
    """Bucket a cloud into pillars and build the pseudo-image tensor.

    Points outside the configured ranges are discarded.  Pillars appear
    in first-point-encountered order; beyond the caps both surplus
    pillars and surplus points are dropped keep-first.  Per-pillar
    centroids are taken over the retained points, so the offset channels
    of every pillar sum to zero exactly.
    """
    nx, ny = cfg.nx, cfg.ny
    cap_p, cap_n = cfg.max_pillars, cfg.max_points_per_pillar
    pts = pc.points.astype(np.float64)
    x, y, z, r = pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3]

    (x0, x1), (y0, y1), (z0, z1) = cfg.x_range, cfg.y_range, cfg.z_range
    in_range = (
        (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (z >= z0) & (z < z1)
    )
    x, y, z, r = x[in_range], y[in_range], z[in_range], r[in_range]

    dx, dy = cfg.pillar_size
    ix = np.clip(np.floor((x - x0) / dx).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor((y - y0) / dy).astype(np.int64), 0, ny - 1)
    rank, within, cells = first_seen_groups(ix * ny + iy)

    keep = (rank < cap_p) & (within < cap_n)
    k = int(min(len(cells), cap_p))
    pr, pn = rank[keep], within[keep]
    xk, yk, zk, rk = x[keep], y[keep], z[keep], r[keep]

    counts = np.zeros(cap_p, dtype=np.int32)
    counts[:k] = np.bincount(pr, minlength=k)[:k]
    with np.errstate(invalid="ignore"):
        cx = np.bincount(pr, weights=xk, minlength=k)[:k] / counts[:k]
        cy = np.bincount(pr, weights=yk, minlength=k)[:k] / counts[:k]
        cz = np.bincount(pr, weights=zk, minlength=k)[:k] / counts[:k]

    coords = np.zeros((cap_p, 2), dtype=np.int32)
    coords[:k, 0] = cells[:k] // ny
    coords[:k, 1] = cells[:k] % ny

    features = np.zeros((FEATURE_DIM, cap_p, cap_n), dtype=np.float32)
    features[0, pr, pn] = xk
    features[1, pr, pn] = yk
    features[2, pr, pn] = zk
    features[3, pr, pn] = rk
    features[4, pr, pn] = xk - cx[pr]
    features[5, pr, pn] = yk - cy[pr]
    features[6, pr, pn] = zk - cz[pr]
    features[7, pr, pn] = x0 + (coords[pr, 0] + 0.5) * dx
    features[8, pr, pn] = y0 + (coords[pr, 1] + 0.5) * dy

    return PillarTensor(
        features=features,
        pillar_coords=coords,
        counts=counts,
        num_nonempty=k,
        grid_shape=(nx, ny),
    )


def scatter_to_canvas(
    pt: PillarTensor, features: np.ndarray | None = None, reducer: str = "mean"
) -> np.ndarray:
    """Scatter per-pillar vectors onto a dense (C, H, W) BEV canvas.

    With ``features`` (num_nonempty x C) supplied, those vectors are
    scattered as-is; otherwise each pillar's 9 raw channels are reduced
    over its valid points with ``reducer`` ("mean" or "max").  The canvas
    is indexed (channel, grid_iy, grid_ix); empty cells stay zero.
    """
    if reducer not in ("mean", "max"):
        raise ValueError(f"unknown reducer {reducer!r}")
    k = pt.num_nonempty
    coords = pt.pillar_coords[:k]
    nx, ny = pt.grid_shape
    if k and (
        coords[:, 0].min() < 0
        or coords[:, 0].max() >= nx
        or coords[:, 1].min() < 0
        or coords[:, 1].max() >= ny
    ):
        raise CoordOutOfGrid(f"pillar coords outside {nx} x {ny} grid")

    if features is None:
        feats = pt.features[:, :k, :].astype(np.float64)
        valid = np.arange(feats.shape[2])[None, :] < pt.counts[:k, None]
        if reducer == "mean":
            total = (feats * valid[None]).sum(axis=2)
            reduced = total / np.maximum(pt.counts[:k], 1)
        else:
            masked = np.where(valid[None], feats, -np.inf)
            reduced = masked.max(axis=2)
            reduced[~np.isfinite(reduced)] = 0.0
        reduced = reduced.T  # (K, C)
    else:
        reduced = np.asarray(features, dtype=np.float64)
        if reduced.ndim != 2 or reduced.shape[0] != k:
            raise ValueError(
                f"per-pillar features must be ({k}, C), got {reduced.shape}"
            )

    canvas = np.zeros((reduced.shape[1], ny, nx), dtype=np.float64)
    canvas[:, coords[:, 1], coords[:, 0]] = reduced.T
    return canvas


_DUMP_HEADER = struct.Struct("<III")


def write_pillar_dump(pt: PillarTensor, path) -> None:
    """Binary pseudo-image dump: (D, P, N) uint32 LE header, then the
    features in D-major float32 order."""
    d, p, n = pt.features.shape
    with open(path, "wb") as f:
        f.write(_DUMP_HEADER.pack(d, p, n))
        f.write(np.ascontiguousarray(pt.features, dtype="<f4").tobytes())


def read_pillar_dump(path) -> np.ndarray:
    with open(path, "rb") as f:
        d, p, n = _DUMP_HEADER.unpack(f.read(_DUMP_HEADER.size))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != d * p * n:
        raise BadConfig(f"dump payload {data.size} != {d}*{p}*{n}")
    return data.reshape(d, p, n)

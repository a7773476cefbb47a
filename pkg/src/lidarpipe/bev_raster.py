"""Bird's-eye-view rasterization: point height encoded as color.

The overhead image keeps, per pixel, the highest in-range point; its z is
normalized over the configured z range and looked up in a 256-entry
palette.  Forward (+x) is up, left (+y) is image-left, empty cells are
black.  Output is written as binary PPM (P6) so golden files compare
bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadConfig
from .kitti_io import PointCloud


def _polynomial_palette(coeffs) -> np.ndarray:
    t = np.linspace(0.0, 1.0, 256)
    chans = [np.polyval(c[::-1], t) for c in coeffs]
    rgb = np.clip(np.stack(chans, axis=1), 0.0, 1.0)
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


# quintic fit of the "turbo" rainbow, evaluated once at import
_TURBO_COEFFS = (
    (0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943),
    (0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604),
    (0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973),
)

PALETTES = {
    "turbo": _polynomial_palette(_TURBO_COEFFS),
    "gray": np.repeat(np.arange(256, dtype=np.uint8)[:, None], 3, axis=1),
}
for _lut in PALETTES.values():
    _lut.setflags(write=False)


def palette(name: str) -> np.ndarray:
    """The named (256, 3) uint8 lookup table."""
    try:
        return PALETTES[name]
    except KeyError:
        raise BadConfig(f"unknown palette {name!r}; have {sorted(PALETTES)}") from None


@dataclass(frozen=True)
class BevConfig:
    """Raster extents (inclusive), meters-per-pixel and palette name."""

    x_range: tuple[float, float] = (0.0, 69.12)
    y_range: tuple[float, float] = (-39.68, 39.68)
    z_range: tuple[float, float] = (-3.0, 1.0)
    resolution: float = 0.16
    colormap: str = "turbo"

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise BadConfig(f"empty range ({lo}, {hi})")
        if not self.resolution > 0.0:
            raise BadConfig(f"resolution must be positive, got {self.resolution}")
        palette(self.colormap)

    @property
    def image_shape(self) -> tuple[int, int]:
        h = math.ceil((self.x_range[1] - self.x_range[0]) / self.resolution)
        w = math.ceil((self.y_range[1] - self.y_range[0]) / self.resolution)
        return (h, w)


def rasterize_bev(pc: PointCloud, cfg: BevConfig) -> np.ndarray:
    """Render the cloud to an (H, W, 3) uint8 image, max-height per pixel."""
    h, w = cfg.image_shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    pts = pc.points.astype(np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    (x0, x1), (y0, y1), (z0, z1) = cfg.x_range, cfg.y_range, cfg.z_range
    keep = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1) & (z >= z0) & (z <= z1)
    if not keep.any():
        return img
    x, y, z = x[keep], y[keep], z[keep]

    row = np.clip(np.floor((x1 - x) / cfg.resolution).astype(np.int64), 0, h - 1)
    col = np.clip(np.floor((y1 - y) / cfg.resolution).astype(np.int64), 0, w - 1)
    flat = row * w + col

    zbuf = np.full(h * w, -np.inf)
    np.maximum.at(zbuf, flat, z)
    hit = np.isfinite(zbuf)
    t = (zbuf[hit] - z0) / (z1 - z0)
    idx = np.floor(t * 255.0 + 0.5).astype(np.int64)
    img.reshape(-1, 3)[hit] = palette(cfg.colormap)[idx]
    return img


def write_ppm(img: np.ndarray, path) -> None:
    """Binary PPM (P6), 8 bits per channel."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise BadConfig(f"expected (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError("not a binary P6 PPM produced by this module")
    w, h = (int(v) for v in parts[1].split())
    img = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8)
    return img.reshape(h, w, 3).copy()

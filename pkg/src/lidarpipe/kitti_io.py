"""Bit-exact parsing and writing of KITTI files.

Covers the four on-disk artifacts: Velodyne point clouds (raw float32
binary), label files, calibration files and detection-result files
(label line plus trailing confidence score).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    MalformedCalib,
    MalformedCloud,
    MalformedLabel,
    MissingCalibEntry,
    NonFiniteValue,
    ReflectanceOutOfRange,
)

KNOWN_CLASSES = frozenset(
    {
        "Car",
        "DontCare",
        "Pedestrian",
        "Van",
        "Cyclist",
        "Truck",
        "Misc",
        "Tram",
        "Person_sitting",
    }
)

POINT_RECORD_BYTES = 16  # four little-endian float32: x, y, z, reflectance


@dataclass(frozen=True)
class PointCloud:
    """N points of (x, y, z, reflectance), always in the LiDAR frame.

    ``points`` is an (N, 4) float32 array, frozen after construction so
    clouds can be shared across threads.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise MalformedCloud(f"expected (N, 4) points, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise NonFiniteValue("point cloud contains NaN or Inf")
        r = pts[:, 3]
        if pts.size and (r.min() < 0.0 or r.max() > 1.0):
            raise ReflectanceOutOfRange(
                f"reflectance outside [0, 1]: min={r.min()}, max={r.max()}"
            )
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


def parse_point_cloud(data: bytes) -> PointCloud:
    """Decode consecutive little-endian float32 (x, y, z, r) quadruples."""
    if len(data) % POINT_RECORD_BYTES != 0:
        raise MalformedCloud(
            f"{len(data)} bytes is not a multiple of {POINT_RECORD_BYTES}"
        )
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(pts)


def serialize_point_cloud(pc: PointCloud) -> bytes:
    """Inverse of :func:`parse_point_cloud`; bit-exact for any finite cloud."""
    return np.ascontiguousarray(pc.points, dtype="<f4").tobytes()


def load_point_cloud(path) -> PointCloud:
    with open(path, "rb") as f:
        return parse_point_cloud(f.read())


@dataclass(frozen=True)
class Annotation:
    """One KITTI label row.

    ``dims`` is (h, w, l) in meters and ``location`` the camera-frame
    bottom-face center, both exactly as stored on disk.  DontCare rows
    keep their -1/-1000 sentinels.
    """

    label: str
    truncated: float
    occluded: int
    alpha: float
    bbox2d: tuple[float, float, float, float]  # left, top, right, bottom
    dims: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # camera frame
    rotation_y: float

    def __post_init__(self):
        if self.label not in KNOWN_CLASSES:
            raise MalformedLabel(0, f"unknown class {self.label!r}")
        left, top, right, bottom = self.bbox2d
        if right < left or bottom < top:
            raise MalformedLabel(0, "degenerate 2D box (right < left or bottom < top)")
        if self.label != "DontCare":
            if self.occluded not in (0, 1, 2, 3):
                raise MalformedLabel(0, f"occluded={self.occluded} not in 0..3")
            if not 0.0 <= self.truncated <= 1.0:
                raise MalformedLabel(0, f"truncated={self.truncated} not in [0, 1]")
            if min(self.dims) < 0.0:
                raise MalformedLabel(0, f"negative dimensions {self.dims}")


@dataclass(frozen=True)
class Detection(Annotation):
    """Annotation plus a confidence score (16th field of a result line)."""

    score: float = field(default=math.nan)

    def __post_init__(self):
        super().__post_init__()
        if math.isnan(self.score):
            raise MalformedLabel(0, "detection requires an explicit score")


def _parse_float(tok: str, line_no: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise MalformedLabel(line_no, f"unparseable number {tok!r}") from None
    if not math.isfinite(v):
        raise MalformedLabel(line_no, f"non-finite number {tok!r}")
    return v


def _parse_occluded(tok: str, line_no: int) -> int:
    v = _parse_float(tok, line_no)
    if v != int(v):
        raise MalformedLabel(line_no, f"occluded={tok!r} is not an integer")
    return int(v)


def _parse_object_line(fields: list[str], line_no: int):
    label = fields[0]
    if label not in KNOWN_CLASSES:
        raise MalformedLabel(line_no, f"unknown class {label!r}")
    nums = [_parse_float(t, line_no) for t in fields[1:15]]
    kwargs = dict(
        label=label,
        truncated=nums[0],
        occluded=_parse_occluded(fields[2], line_no),
        alpha=nums[2],
        bbox2d=tuple(nums[3:7]),
        dims=tuple(nums[7:10]),
        location=tuple(nums[10:13]),
        rotation_y=nums[13],
    )
    return kwargs


def parse_labels(text: str) -> list[Annotation]:
    """Parse a KITTI label file: 15 whitespace-separated fields per line.

    Blank lines are skipped; anything else malformed raises
    :class:`MalformedLabel` with the offending line number.
    """
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 15:
            raise MalformedLabel(line_no, f"expected 15 fields, got {len(fields)}")
        try:
            out.append(Annotation(**_parse_object_line(fields, line_no)))
        except MalformedLabel as e:
            if e.line_no == 0:
                raise MalformedLabel(line_no, str(e)) from None
            raise
    return out


def parse_detections(text: str) -> list[Detection]:
    """Parse a KITTI result file: label fields plus a 16th score field."""
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 16:
            raise MalformedLabel(line_no, f"expected 16 fields, got {len(fields)}")
        kwargs = _parse_object_line(fields, line_no)
        kwargs["score"] = _parse_float(fields[15], line_no)
        try:
            out.append(Detection(**kwargs))
        except MalformedLabel as e:
            if e.line_no == 0:
                raise MalformedLabel(line_no, str(e)) from None
            raise
    return out


def _format_object(ann: Annotation) -> str:
    tail = [ann.alpha, *ann.bbox2d, *ann.dims, *ann.location, ann.rotation_y]
    return " ".join(
        [ann.label, f"{ann.truncated:.6f}", str(ann.occluded)]
        + [f"{v:.6f}" for v in tail]
    )


def write_annotations(anns: list[Annotation]) -> str:
    return "".join(_format_object(a) + "\n" for a in anns)


def write_detections(dets: list[Detection]) -> str:
    """Serialize detections at 6 decimal places; inverse of parse at that
    precision."""
    return "".join(f"{_format_object(d)} {d.score:.6f}\n" for d in dets)


@dataclass(frozen=True)
class Calibration:
    """Camera projection (P2), rectification (R0_rect) and the rigid
    LiDAR-to-camera transform (Tr_velo_to_cam)."""

    p2: np.ndarray  # 3x4
    r0_rect: np.ndarray  # 3x3
    tr_velo_to_cam: np.ndarray  # 3x4

    def __post_init__(self):
        p2 = np.asarray(self.p2, dtype=np.float64).reshape(3, 4)
        r0 = np.asarray(self.r0_rect, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
        if not (np.isfinite(p2).all() and np.isfinite(r0).all() and np.isfinite(tr).all()):
            raise MalformedCalib("calibration contains NaN or Inf")
        if np.abs(r0 @ r0.T - np.eye(3)).max() > 1e-3:
            raise MalformedCalib("R0_rect is not orthonormal within 1e-3")
        if p2[0, 0] <= 0.0:
            raise MalformedCalib(f"P2 focal length {p2[0, 0]} must be positive")
        for m in (p2, r0, tr):
            m.setflags(write=False)
        object.__setattr__(self, "p2", p2)
        object.__setattr__(self, "r0_rect", r0)
        object.__setattr__(self, "tr_velo_to_cam", tr)


_CALIB_ROWS = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


def parse_calib(text: str) -> Calibration:
    """Parse the named rows P2, R0_rect and Tr_velo_to_cam (row-major).

    Extra rows (P0, P1, P3, Tr_imu_to_velo, ...) are tolerated and ignored.
    """
    values = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        name, _, rest = line.partition(":")
        name = name.strip()
        if name not in _CALIB_ROWS:
            continue
        toks = rest.split()
        if len(toks) != _CALIB_ROWS[name]:
            raise MalformedCalib(
                f"{name}: expected {_CALIB_ROWS[name]} values, got {len(toks)}"
            )
        try:
            values[name] = np.array([float(t) for t in toks], dtype=np.float64)
        except ValueError as e:
            raise MalformedCalib(f"{name}: {e}") from None
    for name in _CALIB_ROWS:
        if name not in values:
            raise MissingCalibEntry(name)
    return Calibration(
        p2=values["P2"].reshape(3, 4),
        r0_rect=values["R0_rect"].reshape(3, 3),
        tr_velo_to_cam=values["Tr_velo_to_cam"].reshape(3, 4),
    )


def serialize_calib(calib: Calibration) -> str:
    """Write the three named rows; parse(serialize(parse(x))) == parse(x)."""
    def row(name, m):
        return name + ": " + " ".join(f"{v:.12e}" for v in np.ravel(m))

    return "\n".join(
        [
            row("P2", calib.p2),
            row("R0_rect", calib.r0_rect),
            row("Tr_velo_to_cam", calib.tr_velo_to_cam),
        ]
    ) + "\n"


def load_calib(path) -> Calibration:
    with open(path) as f:
        return parse_calib(f.read())


def load_labels(path) -> list[Annotation]:
    with open(path) as f:
        return parse_labels(f.read())


def load_detections(path) -> list[Detection]:
    with open(path) as f:
        return parse_detections(f.read())

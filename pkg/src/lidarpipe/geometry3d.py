"""Coordinate transforms, oriented-box geometry, rotated IoU and NMS.

Conventions: the LiDAR frame is x-forward, y-left, z-up with yaw measured
counterclockwise from +x about +z.  The camera frame is KITTI's x-right,
y-down, z-forward; a label's rotation_y maps to LiDAR yaw as
``yaw = -ry - pi/2``.  All angles are kept in (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadBox, NotAPhysicalBox
from .kitti_io import Annotation, Calibration, PointCloud

LIDAR = "lidar"
CAMERA = "camera"

_AREA_EPS = 1e-12  # intersections below this area count as empty


def normalize_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: geometric center, (l, w, h) extents and yaw.

    Length runs along the box's local x axis, width along local y,
    height along the frame's vertical axis.
    """

    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # l, w, h
    yaw: float
    frame: str = LIDAR

    def __post_init__(self):
        if self.frame not in (LIDAR, CAMERA):
            raise BadBox(f"unknown frame {self.frame!r}")
        c = tuple(float(v) for v in self.center)
        d = tuple(float(v) for v in self.dims)
        if len(c) != 3 or len(d) != 3:
            raise BadBox("center and dims must have 3 components")
        if not all(math.isfinite(v) for v in c):
            raise BadBox(f"non-finite center {c}")
        if min(d) <= 0.0 or not all(math.isfinite(v) for v in d):
            raise BadBox(f"dimensions must be positive, got {d}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "yaw", float(normalize_angle(float(self.yaw))))

    @property
    def volume(self) -> float:
        l, w, h = self.dims
        return l * w * h


def _as_xyz(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.xyz.astype(np.float64)
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts[:, :3]


def lidar_to_camera(points, calib: Calibration) -> np.ndarray:
    """Map LiDAR points into the rectified camera frame.

    Returns an (N, 3) array of r0_rect @ (Tr_velo_to_cam @ [x y z 1]);
    reflectance, if present, is dropped.
    """
    xyz = _as_xyz(points)
    tr = calib.tr_velo_to_cam
    cam = xyz @ tr[:, :3].T + tr[:, 3]
    return cam @ calib.r0_rect.T


def camera_to_lidar(points_cam, calib: Calibration) -> np.ndarray:
    """Inverse of :func:`lidar_to_camera`."""
    xyz = _as_xyz(points_cam)
    ref = xyz @ np.linalg.inv(calib.r0_rect).T
    tr = calib.tr_velo_to_cam
    rot_inv = np.linalg.inv(tr[:, :3])
    return (ref - tr[:, 3]) @ rot_inv.T


def project_to_image(points_cam, calib: Calibration) -> np.ndarray:
    """Perspective-project camera-frame points through P2.

    Returns an (M, 3) array whose rows are (u, v, depth) for the points
    with positive camera depth, in input order; points at or behind the
    image plane are dropped.
    """
    uvd, valid = _project_all(points_cam, calib.p2)
    return uvd[valid]


def _project_all(points_cam, p2) -> tuple[np.ndarray, np.ndarray]:
    xyz = _as_xyz(points_cam)
    hom = xyz @ p2[:, :3].T + p2[:, 3]
    depth = hom[:, 2]
    valid = depth > 0.0
    uvd = np.empty_like(hom)
    with np.errstate(divide="ignore", invalid="ignore"):
        uvd[:, 0] = hom[:, 0] / depth
        uvd[:, 1] = hom[:, 1] / depth
    uvd[:, 2] = depth
    return uvd, valid


def camera_label_to_lidar_box(ann: Annotation, calib: Calibration) -> Box3D:
    """Convert a camera-frame annotation into a LiDAR-frame Box3D.

    The annotation location is the bottom-face center; the returned box
    is centered geometrically (z lifted by h/2).
    """
    if ann.label == "DontCare":
        raise NotAPhysicalBox("DontCare rows carry no box geometry")
    h, w, l = ann.dims
    bottom = camera_to_lidar(np.array(ann.location, dtype=np.float64), calib)[0]
    center = (bottom[0], bottom[1], bottom[2] + h / 2.0)
    yaw = float(normalize_angle(-ann.rotation_y - math.pi / 2.0))
    return Box3D(center=center, dims=(l, w, h), yaw=yaw, frame=LIDAR)


def lidar_box_to_camera_label(box: Box3D, calib: Calibration):
    """Inverse of :func:`camera_label_to_lidar_box`.

    Returns (location, (h, w, l), rotation_y) in label conventions:
    camera-frame bottom-face center and camera yaw.
    """
    if box.frame != LIDAR:
        raise BadBox("expected a LiDAR-frame box")
    l, w, h = box.dims
    cx, cy, cz = box.center
    bottom = np.array([cx, cy, cz - h / 2.0], dtype=np.float64)
    loc = lidar_to_camera(bottom, calib)[0]
    ry = float(normalize_angle(-box.yaw - math.pi / 2.0))
    return (float(loc[0]), float(loc[1]), float(loc[2])), (h, w, l), ry


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 corners of a box, as an (8, 3) array.

    Ordering is fixed: bottom face counterclockwise viewed from +z
    starting at (+l/2, +w/2), then the top face in the same order.
    """
    l, w, h = box.dims
    sx = np.array([1, -1, -1, 1, 1, -1, -1, 1], dtype=np.float64) * (l / 2.0)
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=np.float64) * (w / 2.0)
    sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1], dtype=np.float64) * (h / 2.0)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * sx - s * sy + box.center[0]
    y = s * sx + c * sy + box.center[1]
    z = sz + box.center[2]
    return np.stack([x, y, z], axis=1)


def footprint_corners(box: Box3D) -> np.ndarray:
    """The (4, 2) BEV footprint rectangle, counterclockwise."""
    return box_corners(box)[:4, :2]


def _polygon_area(poly: np.ndarray) -> float:
    # shoelace; positive for counterclockwise vertex order
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against a CCW convex one."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        polygon = output
        output = []
        prev = polygon[-1]
        # signed distance surrogate: >= 0 means on or left of the clip edge
        prev_val = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in polygon:
            cur_val = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if (cur_val >= 0.0) != (prev_val >= 0.0):
                t = prev_val / (prev_val - cur_val)
                output.append(
                    (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                )
            if cur_val >= 0.0:
                output.append(cur)
            prev, prev_val = cur, cur_val
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _bev_intersection_area(a: Box3D, b: Box3D) -> float:
    inter = _clip_convex(footprint_corners(a), footprint_corners(b))
    area = abs(_polygon_area(inter))
    return area if area > _AREA_EPS else 0.0


def _check_same_frame(a: Box3D, b: Box3D):
    if a.frame != b.frame:
        raise ValueError(f"boxes in different frames: {a.frame} vs {b.frame}")


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the yaw-rotated BEV footprints, in [0, 1]."""
    _check_same_frame(a, b)
    inter = _bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    area_a = a.dims[0] * a.dims[1]
    area_b = b.dims[0] * b.dims[1]
    return inter / (area_a + area_b - inter)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV intersection area times vertical overlap."""
    _check_same_frame(a, b)
    inter_area = _bev_intersection_area(a, b)
    if inter_area == 0.0:
        return 0.0
    za0, za1 = a.center[2] - a.dims[2] / 2.0, a.center[2] + a.dims[2] / 2.0
    zb0, zb1 = b.center[2] - b.dims[2] / 2.0, b.center[2] + b.dims[2] / 2.0
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter_vol = inter_area * dz
    return inter_vol / (a.volume + b.volume - inter_vol)


def nms_rotated(boxes: list[Box3D], scores, iou_threshold: float) -> list[int]:
    """Greedy rotated-BEV NMS; returns retained indices in descending-score
    order.  Equal scores break toward the lower original index; a box is
    suppressed when its IoU with a retained box strictly exceeds the
    threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must have equal length")
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    for idx in order:
        box = boxes[idx]
        if all(rotated_iou_bev(box, boxes[k]) <= iou_threshold for k in keep):
            keep.append(int(idx))
    return keep

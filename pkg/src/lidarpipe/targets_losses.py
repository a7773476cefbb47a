"""Anchor generation, target assignment, residual coding and losses.

Residuals normalize center offsets by the anchor's BEV diagonal
d_a = sqrt(w_a^2 + l_a^2) and dimensions by log ratios; the heading
residual is either sin(theta_gt - theta_a) ("sin_diff") or the wrapped
raw difference ("raw_diff").  Loss weights default to beta_loc = 0.2,
beta_cls = 1.0, beta_dir = 0.2 with the focal loss at alpha = 0.25,
gamma = 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import BadBox, OutOfRangeAngle
from .geometry3d import Box3D, normalize_angle, rotated_iou_bev

SIN_DIFF = "sin_diff"
RAW_DIFF = "raw_diff"

NEGATIVE = -1
IGNORE = -2

PROB_FLOOR = 1e-12  # applied before any log so saturated inputs stay finite


@dataclass(frozen=True)
class AnchorGrid:
    """Anchors tiled over a BEV grid, two yaws (0 and pi/2) per cell.

    Flat layout: index = (iy * grid_w + ix) * 2 + yaw_idx.
    """

    anchors: tuple[Box3D, ...]
    grid_shape: tuple[int, int]  # (h, w) cells

    def __len__(self):
        return len(self.anchors)

    def __iter__(self):
        return iter(self.anchors)

    def __getitem__(self, i):
        return self.anchors[i]

    def index(self, ix: int, iy: int, yaw_idx: int) -> int:
        return (iy * self.grid_shape[1] + ix) * 2 + yaw_idx


def generate_anchors(
    grid_shape: tuple[int, int],
    size: tuple[float, float, float],
    z_center: float,
    stride: float,
) -> AnchorGrid:
    """Lay one class's anchors over an (h, w) BEV grid.

    ``size`` is (w, l, h); centers sit at cell centers, x = (ix + 0.5) *
    stride and y = (iy + 0.5) * stride, all at ``z_center``.
    """
    h, w = grid_shape
    if h < 1 or w < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid_shape}")
    aw, al, ah = size
    boxes = []
    for iy in range(h):
        for ix in range(w):
            cx = (ix + 0.5) * stride
            cy = (iy + 0.5) * stride
            for yaw in (0.0, math.pi / 2.0):
                boxes.append(
                    Box3D(center=(cx, cy, z_center), dims=(al, aw, ah), yaw=yaw)
                )
    return AnchorGrid(anchors=tuple(boxes), grid_shape=(h, w))


@dataclass(frozen=True)
class Assignment:
    """Per-anchor assignment: gt index if positive, else NEGATIVE/IGNORE."""

    gt_index: np.ndarray  # (A,) int64

    def __post_init__(self):
        self.gt_index.setflags(write=False)

    @property
    def n_pos(self) -> int:
        return int((self.gt_index >= 0).sum())

    @property
    def n_neg(self) -> int:
        return int((self.gt_index == NEGATIVE).sum())


def assign_targets(
    anchors: Sequence[Box3D] | AnchorGrid,
    gt_boxes: Sequence[Box3D],
    pos_iou: float,
    neg_iou: float,
) -> Assignment:
    """Assign anchors by BEV rotated IoU.

    An anchor is positive toward its best-overlap ground truth when that
    IoU reaches ``pos_iou``; negative when its best IoU is below
    ``neg_iou``; otherwise ignored.  Every ground truth force-matches its
    best-overlap anchor even below ``pos_iou`` (ties toward the lower
    anchor index; an anchor forced by several ground truths takes the
    highest-IoU one, ties toward the lower gt index).
    """
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise ValueError(f"need 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}")
    boxes = list(anchors)
    a, g = len(boxes), len(gt_boxes)
    if g == 0:
        return Assignment(np.full(a, NEGATIVE, dtype=np.int64))

    iou = np.empty((a, g), dtype=np.float64)
    for i, anc in enumerate(boxes):
        for j, gt in enumerate(gt_boxes):
            iou[i, j] = rotated_iou_bev(anc, gt)

    best_gt = iou.argmax(axis=1)  # ties: lower gt index
    max_iou = iou[np.arange(a), best_gt]
    status = np.full(a, IGNORE, dtype=np.int64)
    status[max_iou < neg_iou] = NEGATIVE
    status[max_iou >= pos_iou] = best_gt[max_iou >= pos_iou]

    forced: dict[int, int] = {}
    for j in range(g):
        i = int(iou[:, j].argmax())  # ties: lower anchor index
        if i not in forced or iou[i, j] > iou[i, forced[i]]:
            forced[i] = j
    for i, j in forced.items():
        status[i] = j
    return Assignment(status)


class ResidualVector(NamedTuple):
    """The 7 regression targets (dx, dy, dz, dw, dl, dh, dtheta)."""

    dx: float
    dy: float
    dz: float
    dw: float
    dl: float
    dh: float
    dtheta: float


def _check_dims(box: Box3D):
    if min(box.dims) <= 0.0:
        raise BadBox(f"non-positive dimensions {box.dims}")


def encode_residuals(
    gt: Box3D, anchor: Box3D, angle_mode: str = SIN_DIFF
) -> ResidualVector:
    """Encode a ground-truth box against an anchor."""
    _check_dims(gt)
    _check_dims(anchor)
    la, wa, ha = anchor.dims
    lg, wg, hg = gt.dims
    d_a = math.hypot(wa, la)
    diff = gt.yaw - anchor.yaw
    if angle_mode == SIN_DIFF:
        dtheta = math.sin(diff)
    elif angle_mode == RAW_DIFF:
        dtheta = float(normalize_angle(diff))
    else:
        raise ValueError(f"unknown angle_mode {angle_mode!r}")
    return ResidualVector(
        dx=(gt.center[0] - anchor.center[0]) / d_a,
        dy=(gt.center[1] - anchor.center[1]) / d_a,
        dz=(gt.center[2] - anchor.center[2]) / d_a,
        dw=math.log(wg / wa),
        dl=math.log(lg / la),
        dh=math.log(hg / ha),
        dtheta=dtheta,
    )


def decode_residuals(
    rv: ResidualVector, anchor: Box3D, angle_mode: str = SIN_DIFF
) -> Box3D:
    """Algebraic inverse of :func:`encode_residuals`.

    sin mode decodes on the principal branch, theta = theta_a +
    asin(dtheta), so it inverts encode only for |theta_gt - theta_a| <=
    pi/2.
    """
    _check_dims(anchor)
    la, wa, ha = anchor.dims
    d_a = math.hypot(wa, la)
    if angle_mode == SIN_DIFF:
        if abs(rv.dtheta) > 1.0:
            raise OutOfRangeAngle(f"sin-mode dtheta {rv.dtheta} outside [-1, 1]")
        yaw = anchor.yaw + math.asin(rv.dtheta)
    elif angle_mode == RAW_DIFF:
        yaw = anchor.yaw + rv.dtheta
    else:
        raise ValueError(f"unknown angle_mode {angle_mode!r}")
    return Box3D(
        center=(
            anchor.center[0] + rv.dx * d_a,
            anchor.center[1] + rv.dy * d_a,
            anchor.center[2] + rv.dz * d_a,
        ),
        dims=(la * math.exp(rv.dl), wa * math.exp(rv.dw), ha * math.exp(rv.dh)),
        yaw=yaw,
        frame=anchor.frame,
    )


def smooth_l1(x: float) -> float:
    """0.5 x^2 inside the unit interval, |x| - 0.5 outside."""
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def localization_loss(deltas: Iterable[float]) -> float:
    """Sum of smooth L1 over the residual components."""
    return sum(smooth_l1(d) for d in deltas)


def focal_loss(p: float, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """-alpha (1-p)^gamma log p for the positive-class probability p."""
    return -alpha * (1.0 - p) ** gamma * math.log(max(p, PROB_FLOOR))


def binary_cross_entropy(p: float, target: int) -> float:
    """-[t log p + (1-t) log(1-p)] with p clamped away from {0, 1}."""
    if target not in (0, 1):
        raise ValueError(f"target must be 0 or 1, got {target}")
    p = min(max(p, PROB_FLOOR), 1.0 - PROB_FLOOR)
    return -(target * math.log(p) + (1 - target) * math.log(1.0 - p))


def direction_loss(
    pred_logits: Sequence[float], gt_theta: float, anchor_theta: float
) -> float:
    """Two-bin heading softmax cross-entropy.

    The target bin is 1 when the wrapped heading difference is
    non-negative, else 0; this disambiguates the sign the sin residual
    loses.
    """
    if len(pred_logits) != 2:
        raise ValueError("expected a pair of logits")
    target = 1 if float(normalize_angle(gt_theta - anchor_theta)) >= 0.0 else 0
    a, b = float(pred_logits[0]), float(pred_logits[1])
    m = max(a, b)
    lse = m + math.log(math.exp(a - m) + math.exp(b - m))
    return lse - float(pred_logits[target])


def total_loss_pfe(
    loc_sum: float,
    cls_sum: float,
    dir_sum: float,
    n_pos: int,
    beta_loc: float = 0.2,
    beta_cls: float = 1.0,
    beta_dir: float = 0.2,
) -> float:
    """Weighted sum of the three partial losses over the positive count.

    Frames without positives use divisor 1 (their loc/dir sums are zero
    by construction).
    """
    return (beta_loc * loc_sum + beta_cls * cls_sum + beta_dir * dir_sum) / max(
        n_pos, 1
    )


def total_loss_vfe(
    pos_cls_terms: Sequence[float],
    neg_cls_terms: Sequence[float],
    reg_terms: Sequence[float],
    alpha: float = 1.5,
    beta: float = 1.0,
    n_pos: int | None = None,
    n_neg: int | None = None,
) -> float:
    """alpha/N_pos * sum(pos bce) + beta/N_neg * sum(neg bce) + 1/N_pos *
    sum(reg), with zero counts falling back to divisor 1.

    Each reg term is the smooth L1 sum over one positive anchor's 7
    residuals (see :func:`localization_loss`).
    """
    n_pos = len(pos_cls_terms) if n_pos is None else n_pos
    n_neg = len(neg_cls_terms) if n_neg is None else n_neg
    pos_div = max(n_pos, 1)
    neg_div = max(n_neg, 1)
    return (
        alpha * math.fsum(pos_cls_terms) / pos_div
        + beta * math.fsum(neg_cls_terms) / neg_div
        + math.fsum(reg_terms) / pos_div
    )

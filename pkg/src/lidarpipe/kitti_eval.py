"""KITTI-style detection evaluation: difficulty strata, greedy matching
per overlap metric (2D box / BEV / 3D), interpolated AP and the summary
report.

Ground truths failing a difficulty's thresholds are "ignored" there:
detections landing on them are neither rewarded nor penalized.  DontCare
regions and, when evaluating Car, Van boxes are treated the same way.
PR samples are pooled across all frames before interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import FrameSetMismatch
from .geometry3d import Box3D, camera_label_to_lidar_box, iou_3d, rotated_iou_bev
from .kitti_io import Annotation, Calibration, Detection

BBOX_2D = "bbox_2d"
BBOX_BEV = "bbox_bev"
BBOX_3D = "bbox_3d"
METRICS = (BBOX_2D, BBOX_BEV, BBOX_3D)

INTERP11 = "interp11"
INTERP40 = "interp40"

DIFFICULTIES = ("easy", "moderate", "hard")


class DifficultyRule(NamedTuple):
    min_bbox_height: float  # pixels
    max_occlusion: int
    max_truncation: float


DEFAULT_DIFFICULTY_RULES: dict[str, DifficultyRule] = {
    "easy": DifficultyRule(40.0, 0, 0.15),
    "moderate": DifficultyRule(25.0, 1, 0.30),
    "hard": DifficultyRule(25.0, 2, 0.50),
}

DEFAULT_IOU_THRESHOLDS: dict[str, float] = {
    "Car": 0.7,
    "Pedestrian": 0.5,
    "Cyclist": 0.5,
}
FALLBACK_IOU_THRESHOLD = 0.5

# detections of the key class overlapping these gt classes are not penalized
DEFAULT_SIMILAR_CLASSES: dict[str, tuple[str, ...]] = {"Car": ("Van",)}


def filter_difficulty(
    anns: Sequence[Annotation], rule: DifficultyRule
) -> tuple[list[int], list[int]]:
    """Split annotation indices into (counted, ignored) under one rule.

    A real-class gt is counted iff its 2D box is tall enough and its
    occlusion/truncation do not exceed the rule's maxima; failing real
    boxes and all DontCare rows are ignored.
    """
    counted, ignored = [], []
    for i, ann in enumerate(anns):
        if ann.label == "DontCare":
            ignored.append(i)
            continue
        height = ann.bbox2d[3] - ann.bbox2d[1]
        ok = (
            height >= rule.min_bbox_height
            and ann.occluded <= rule.max_occlusion
            and ann.truncated <= rule.max_truncation
        )
        (counted if ok else ignored).append(i)
    return counted, ignored


def axis_aligned_iou(a, b) -> float:
    """IoU of two (left, top, right, bottom) pixel boxes."""
    il = max(a[0], b[0])
    it = max(a[1], b[1])
    ir = min(a[2], b[2])
    ib = min(a[3], b[3])
    if ir <= il or ib <= it:
        return 0.0
    inter = (ir - il) * (ib - it)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0.0 else 0.0


class ScoredBox(NamedTuple):
    """A LiDAR-frame box paired with its detection score."""

    score: float
    box: Box3D


@dataclass(frozen=True)
class MatchResult:
    """Outcome of greedy matching for one frame.

    Arrays are aligned with ``order`` (detection indices by descending
    score, ties toward the lower index).  A detection that is neither TP
    nor FP was discarded for overlapping only ignored ground truth.
    """

    order: np.ndarray
    scores: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    num_counted: int

    def __post_init__(self):
        for arr in (self.order, self.scores, self.tp, self.fp):
            arr.setflags(write=False)

    def pr_points(self) -> list[tuple[float, float]]:
        """(recall, precision) after each non-discarded detection."""
        points = []
        tp_cum = fp_cum = 0
        for is_tp, is_fp in zip(self.tp, self.fp):
            if not (is_tp or is_fp):
                continue
            tp_cum += int(is_tp)
            fp_cum += int(is_fp)
            recall = tp_cum / self.num_counted if self.num_counted else 0.0
            points.append((recall, tp_cum / (tp_cum + fp_cum)))
        return points


def match_detections(
    dets: Sequence,
    gts_counted: Sequence,
    gts_ignored: Sequence,
    overlap_fn: Callable,
    iou_threshold: float,
) -> MatchResult:
    """Greedily match score-ranked detections against ground truth.

    Each detection takes the highest-overlap still-unmatched counted gt
    if that overlap reaches the threshold (TP).  Otherwise, if its best
    overlap with an ignored gt reaches the threshold it is discarded;
    else it is an FP.  ``dets`` elements must expose ``.score``.
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(dets), dtype=bool)
    fp = np.zeros(len(dets), dtype=bool)
    taken = [False] * len(gts_counted)

    for pos, det_idx in enumerate(order):
        det = dets[det_idx]
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts_counted):
            if taken[j]:
                continue
            iou = overlap_fn(det, gt)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[best_j] = True
            tp[pos] = True
            continue
        ignored_iou = max(
            (overlap_fn(det, gt) for gt in gts_ignored), default=0.0
        )
        if ignored_iou < iou_threshold:
            fp[pos] = True

    return MatchResult(
        order=order,
        scores=scores[order],
        tp=tp,
        fp=fp,
        num_counted=len(gts_counted),
    )


def average_precision(
    pr_points: Sequence[tuple[float, float]], mode: str = INTERP40
) -> float:
    """Interpolated AP: mean of max-precision-to-the-right at the sample
    recalls (11 points {0, 0.1, ..., 1} or 40 points {1/40, ..., 1})."""
    if mode == INTERP11:
        samples = [i / 10.0 for i in range(11)]
    elif mode == INTERP40:
        samples = [i / 40.0 for i in range(1, 41)]
    else:
        raise ValueError(f"unknown AP mode {mode!r}")
    total = 0.0
    for r in samples:
        total += max(
            (prec for rec, prec in pr_points if rec >= r - 1e-12), default=0.0
        )
    return total / len(samples)


@dataclass(frozen=True)
class EvalReport:
    """AP per (class, difficulty) for one overlap metric, plus the mean."""

    metric: str
    mode: str
    classes: tuple[str, ...]
    ap: dict[tuple[str, str], float]

    @property
    def mean_ap(self) -> float:
        return float(np.mean([self.ap[k] for k in sorted(self.ap)])) if self.ap else 0.0

    def to_text(self) -> str:
        rows = [f"metric: {self.metric} ({self.mode})"]
        header = f"{'class':<16}" + "".join(f"{d:>10}" for d in DIFFICULTIES)
        rows.append(header)
        for cls in self.classes:
            cells = "".join(f"{self.ap[(cls, d)]:>10.4f}" for d in DIFFICULTIES)
            rows.append(f"{cls:<16}{cells}")
        rows.append(f"{'mAP':<16}{self.mean_ap:>10.4f}")
        return "\n".join(rows) + "\n"

    def to_kv(self) -> str:
        lines = [
            f"{cls}.{diff}.{self.metric} {self.ap[(cls, diff)]:.6f}"
            for cls, diff in sorted(self.ap)
        ]
        lines.append(f"mAP.{self.metric} {self.mean_ap:.6f}")
        return "\n".join(lines) + "\n"


def _lidar_box_or_none(ann: Annotation, calib: Calibration):
    if ann.label == "DontCare":
        return None
    return camera_label_to_lidar_box(ann, calib)


def evaluate(
    dets_by_frame: Mapping[str, Sequence[Detection]],
    gts_by_frame: Mapping[str, Sequence[Annotation]],
    calib_by_frame: Mapping[str, Calibration] | None,
    metric: str = BBOX_3D,
    classes: Sequence[str] = ("Car", "Pedestrian", "Cyclist"),
    mode: str = INTERP40,
    iou_thresholds: Mapping[str, float] | None = None,
    difficulty_rules: Mapping[str, DifficultyRule] | None = None,
    similar_classes: Mapping[str, tuple[str, ...]] | None = None,
) -> EvalReport:
    """Run the full protocol over aligned frame maps and summarize AP.

    BBOX_2D compares image-plane boxes; BBOX_BEV and BBOX_3D convert
    labels to LiDAR-frame boxes through each frame's calibration (which
    is then required).  PR samples are pooled over frames, ties between
    equal scores breaking by frame order then detection index.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    frames = sorted(gts_by_frame)
    if sorted(dets_by_frame) != frames:
        raise FrameSetMismatch(
            f"detection frames {sorted(dets_by_frame)} != gt frames {frames}"
        )
    needs_calib = metric in (BBOX_BEV, BBOX_3D)
    if needs_calib:
        if calib_by_frame is None:
            raise FrameSetMismatch("BEV/3D evaluation requires calibrations")
        missing = [f for f in frames if f not in calib_by_frame]
        if missing:
            raise FrameSetMismatch(f"missing calibration for frames {missing}")

    rules = dict(difficulty_rules or DEFAULT_DIFFICULTY_RULES)
    thresholds = dict(iou_thresholds or DEFAULT_IOU_THRESHOLDS)
    similar = dict(
        DEFAULT_SIMILAR_CLASSES if similar_classes is None else similar_classes
    )

    # precompute LiDAR-frame geometry once per frame
    gt_boxes: dict[str, list] = {}
    det_boxes: dict[str, list] = {}
    if needs_calib:
        for f in frames:
            calib = calib_by_frame[f]
            gt_boxes[f] = [_lidar_box_or_none(a, calib) for a in gts_by_frame[f]]
            det_boxes[f] = [
                ScoredBox(d.score, camera_label_to_lidar_box(d, calib))
                for d in dets_by_frame[f]
            ]

    if metric == BBOX_BEV:
        box_overlap = lambda d, g: rotated_iou_bev(d.box, g)
    elif metric == BBOX_3D:
        box_overlap = lambda d, g: iou_3d(d.box, g)
    overlap_2d = lambda d, g: axis_aligned_iou(d.bbox2d, g.bbox2d)

    ap: dict[tuple[str, str], float] = {}
    for cls in classes:
        threshold = thresholds.get(cls, FALLBACK_IOU_THRESHOLD)
        ignorable_labels = set(similar.get(cls, ()))
        for diff in DIFFICULTIES:
            pooled = []  # (score, frame_rank, det_idx, tp, fp)
            total_counted = 0
            for frame_rank, f in enumerate(frames):
                anns = gts_by_frame[f]
                counted_idx, ignored_idx = filter_difficulty(anns, rules[diff])
                counted_idx = [i for i in counted_idx if anns[i].label == cls]
                ignored_idx = [
                    i
                    for i in ignored_idx
                    if anns[i].label in (cls, "DontCare")
                ] + [
                    i
                    for i, a in enumerate(anns)
                    if a.label in ignorable_labels
                ]
                det_sel = [
                    i for i, d in enumerate(dets_by_frame[f]) if d.label == cls
                ]
                if metric == BBOX_2D:
                    dets = [dets_by_frame[f][i] for i in det_sel]
                    counted = [anns[i] for i in counted_idx]
                    ignored = [anns[i] for i in ignored_idx]
                    overlap = overlap_2d
                else:
                    dets = [det_boxes[f][i] for i in det_sel]
                    counted = [gt_boxes[f][i] for i in counted_idx]
                    # DontCare rows carry no 3D geometry; drop them here
                    ignored = [
                        gt_boxes[f][i]
                        for i in ignored_idx
                        if gt_boxes[f][i] is not None
                    ]
                    overlap = box_overlap
                result = match_detections(dets, counted, ignored, overlap, threshold)
                total_counted += result.num_counted
                for pos, det_idx in enumerate(result.order):
                    if result.tp[pos] or result.fp[pos]:
                        pooled.append(
                            (
                                result.scores[pos],
                                frame_rank,
                                int(det_idx),
                                bool(result.tp[pos]),
                                bool(result.fp[pos]),
                            )
                        )
            pooled.sort(key=lambda rec: (-rec[0], rec[1], rec[2]))
            points = []
            tp_cum = fp_cum = 0
            for _, _, _, is_tp, is_fp in pooled:
                tp_cum += int(is_tp)
                fp_cum += int(is_fp)
                recall = tp_cum / total_counted if total_counted else 0.0
                points.append((recall, tp_cum / (tp_cum + fp_cum)))
            ap[(cls, diff)] = average_precision(points, mode)

    return EvalReport(metric=metric, mode=mode, classes=tuple(classes), ap=ap)

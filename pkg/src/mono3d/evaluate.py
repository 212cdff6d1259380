"""KITTI-protocol evaluation: interpolated AP at 11/40 recall points,
difficulty buckets, and depth-error analysis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box2D, iou_2d, iou_bev, iou_3d

__all__ = [
    "EvalConfig",
    "DIFFICULTY_TABLE",
    "bucket",
    "passes_difficulty",
    "match_detections",
    "average_precision",
    "evaluate_class",
    "depth_error_report",
]


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {
        "Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5,
    })
    mode: str = "r40"          # "r11" or "r40"
    task: str = "3d"           # "2d", "bev", or "3d"

    def __post_init__(self):
        if self.mode not in ("r11", "r40"):
            raise ValueError(f"mode must be r11 or r40, got {self.mode}")
        if self.task not in ("2d", "bev", "3d"):
            raise ValueError(f"task must be 2d, bev or 3d, got {self.task}")
        for cls, t in self.iou_thresholds.items():
            if not 0.0 < t <= 1.0:
                raise ValueError(f"IoU threshold for {cls} out of (0, 1]: {t}")

    def threshold_for(self, class_name):
        return self.iou_thresholds.get(class_name, 0.5)


# min 2D box height (px), max occlusion, max truncation per difficulty
DIFFICULTY_TABLE = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}
DIFFICULTIES = ("easy", "moderate", "hard")


def passes_difficulty(height_px, occlusion, truncation, difficulty, table=None):
    min_h, max_occ, max_trunc = (table or DIFFICULTY_TABLE)[difficulty]
    return height_px >= min_h and occlusion <= max_occ and truncation <= max_trunc


def bucket(height_px, occlusion, truncation, table=None):
    """Strictest difficulty the ground truth qualifies for, or "ignored"."""
    for d in DIFFICULTIES:
        if passes_difficulty(height_px, occlusion, truncation, d, table):
            return d
    return "ignored"


def _iou_fn(task):
    if task == "2d":
        return lambda det, gt: iou_2d(det.box2d, gt.as_box2d())
    if task == "bev":
        return lambda det, gt: iou_bev(det.box3d, gt.as_box3d())
    return lambda det, gt: iou_3d(det.box3d, gt.as_box3d())


def match_detections(dets, gts, iou_fn, thresh, ignored_gts=(), dontcare_boxes=()):
    """Greedy score-ordered matching of one image's detections.

    Each detection takes the highest-IoU still-unmatched ground truth above
    the threshold. Detections landing on ignored gts or DontCare regions are
    dropped from scoring (neither TP nor FP). Returns (tp_flags, drop_flags,
    n_matched) with flags aligned to score-descending detection order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    tp = np.zeros(len(dets), dtype=bool)
    drop = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        det = dets[i]
        best, best_j = thresh, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = iou_fn(det, gt)
            if iou >= best:
                best, best_j = iou, j
        if best_j >= 0:
            taken[best_j] = True
            tp[rank] = True
            continue
        # ignored gts and DontCare regions absorb unmatched detections
        for gt in ignored_gts:
            if iou_fn(det, gt) >= thresh:
                drop[rank] = True
                break
        if not drop[rank]:
            for dc in dontcare_boxes:
                if iou_2d(det.box2d, dc) >= thresh:
                    drop[rank] = True
                    break
    scores = np.array([dets[i].score for i in order])
    return scores, tp, drop


def average_precision(scores, tp, num_gt, mode="r40"):
    """Interpolated AP over fixed recall points.

    R11 uses {0, 0.1, ..., 1.0}; R40 uses {1/40, ..., 40/40}. Precision at
    recall r is the maximum precision among operating points with recall >= r.
    """
    if num_gt <= 0:
        raise ValueError("average precision needs at least one ground truth")
    points = np.arange(11) / 10.0 if mode == "r11" else np.arange(1, 41) / 40.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp_sorted = np.asarray(tp, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp_sorted)
    cum_fp = np.cumsum(1.0 - tp_sorted)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    total = 0.0
    for r in points:
        mask = recall >= r - 1e-12
        total += precision[mask].max() if mask.any() else 0.0
    return total / len(points)


def evaluate_class(frames, class_name, config, difficulty="moderate"):
    """AP for one class over (dets, gt_records) frame pairs.

    gt records are kitti.LabelRecord objects; gts of the class that fail the
    difficulty test are ignored (absorb detections, never count as FN), as
    are DontCare regions.
    """
    iou_fn = _iou_fn(config.task)
    thresh = config.threshold_for(class_name)
    all_scores, all_tp = [], []
    num_gt = 0
    for dets, gts in frames:
        dets = [d for d in dets]
        valid, ignored, dontcare = [], [], []
        for g in gts:
            if g.type == "DontCare":
                dontcare.append(g.as_box2d())
            elif g.type == class_name:
                h = g.box2d[3] - g.box2d[1]
                if passes_difficulty(h, g.occlusion, g.truncation, difficulty):
                    valid.append(g)
                else:
                    ignored.append(g)
        num_gt += len(valid)
        scores, tp, drop = match_detections(
            dets, valid, iou_fn, thresh, ignored_gts=ignored, dontcare_boxes=dontcare
        )
        all_scores.extend(scores[~drop])
        all_tp.extend(tp[~drop])
    if num_gt == 0:
        return float("nan")
    return average_precision(np.array(all_scores), np.array(all_tp), num_gt, config.mode)


def depth_error_report(dets, gts, bin_edges, by="depth", iou_thresh=0.5):
    """Mean |z_pred - z_gt| per bin of gt depth (or of mean 2D box size).

    Pairs are matched greedily by score on 2D IoU >= iou_thresh. Returns
    {(lo, hi): mean_abs_error} with empty bins absent.
    """
    if by not in ("depth", "size"):
        raise ValueError(f"binning must be by depth or size, got {by}")
    iou_fn = lambda det, gt: iou_2d(det.box2d, gt.as_box2d())
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    pairs = []
    for i in order:
        best, best_j = iou_thresh, -1
        for j, gt in enumerate(gts):
            if not taken[j] and iou_fn(dets[i], gt) >= best:
                best, best_j = iou_fn(dets[i], gt), j
        if best_j >= 0:
            taken[best_j] = True
            pairs.append((dets[i], gts[best_j]))

    edges = list(bin_edges)
    sums = {k: [0.0, 0] for k in range(len(edges) - 1)}
    for det, gt in pairs:
        err = abs(det.box3d.z - gt.location[2])
        key = gt.location[2] if by == "depth" else (
            (gt.box2d[2] - gt.box2d[0]) + (gt.box2d[3] - gt.box2d[1])) / 2.0
        for k in range(len(edges) - 1):
            if edges[k] <= key < edges[k + 1]:
                sums[k][0] += err
                sums[k][1] += 1
                break
    return {(edges[k], edges[k + 1]): s / n for k, (s, n) in sums.items() if n > 0}

"""Detection assembly: greedy NMS, confidence filtering, yaw post-refinement."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .geometry import Box2D, Box3D, iou_2d, project_box, wrap_angle

__all__ = ["Detection", "nms", "confidence_filter", "optimize_rotation"]


@dataclass
class Detection:
    class_id: int
    score: float
    box2d: Box2D
    box3d: Box3D
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def nms(dets, iou_thresh=0.4):
    """Greedy descending-score suppression on 2D IoU, per class.

    Ties in score keep the lower original index first; classes never suppress
    each other.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou_2d(k.box2d, d.box2d) <= iou_thresh
               for k in kept):
            kept.append(d)
    return kept


def confidence_filter(dets, thresh=0.75):
    """Keep detections scoring at or above the threshold (boundary kept)."""
    return [d for d in dets if d.score >= thresh]


def optimize_rotation(det, cam, sigma0=0.3, sigma_min=1e-3, max_iter=64):
    """Refine yaw so the projected 3D-box envelope matches the 2D box.

    Coordinate search: try yaw +- sigma, accept any improvement of the L1
    corner distance, halve sigma when neither direction improves. The
    objective never increases. Boxes behind the camera come back unchanged
    (flagged via the second return value).
    """
    box = det.box3d
    target = det.box2d.as_array()

    def objective(yaw):
        env = project_box(dataclasses.replace(box, yaw=yaw), cam)
        return float(np.abs(env.as_array() - target).sum())

    try:
        best = objective(box.yaw)
    except ValueError:
        return det, False

    yaw = box.yaw
    sigma = sigma0
    for _ in range(max_iter):
        if sigma < sigma_min:
            break
        improved = False
        for cand in (yaw + sigma, yaw - sigma):
            val = objective(cand)
            if val < best:
                yaw, best = cand, val
                improved = True
                break
        if not improved:
            sigma /= 2.0
    refined = dataclasses.replace(box, yaw=wrap_angle(yaw))
    return dataclasses.replace(det, box3d=refined), True

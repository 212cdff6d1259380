"""Camera projection, 3D box synthesis, and 2D / BEV / 3D IoU.

Camera frame follows the KITTI convention: x right, y down, z forward, with
a 3x4 projection matrix in pixel units. 3D boxes are given at the bottom-face
center and rotate about the camera y axis only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "Box2D",
    "Box3D",
    "project",
    "backproject",
    "alpha_to_yaw",
    "yaw_to_alpha",
    "wrap_angle",
    "box3d_corners",
    "project_box",
    "iou_2d",
    "iou_bev",
    "iou_3d",
    "bev_footprint",
    "polygon_area",
    "clip_polygon",
]

_AREA_EPS = 1e-12


@dataclass
class CameraIntrinsics:
    """3x4 pixel-unit projection matrix (KITTI P2 layout)."""

    K: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        if self.K.shape != (3, 4):
            raise ValueError(f"projection matrix must be 3x4, got {self.K.shape}")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal entries must be positive")

    @staticmethod
    def simple(f, cx, cy):
        return CameraIntrinsics(np.array([
            [f, 0.0, cx, 0.0],
            [0.0, f, cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]))


@dataclass
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"degenerate 2D box {(self.x1, self.y1, self.x2, self.y2)}")

    @property
    def w(self):
        return self.x2 - self.x1

    @property
    def h(self):
        return self.y2 - self.y1

    @property
    def center(self):
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    @staticmethod
    def from_center(cx, cy, w, h):
        return Box2D(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2])


@dataclass
class Box3D:
    """Bottom-face center (x, y, z), dims (w, h, l), yaw about camera y, and
    the observation angle alpha."""

    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    yaw: float
    alpha: float = 0.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0 or self.l <= 0:
            raise ValueError(f"non-positive 3D dimensions {(self.w, self.h, self.l)}")


def wrap_angle(a):
    """Wrap into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def project(cam, point):
    """Pinhole projection of a camera-frame point to (x_p, y_p, z_p)."""
    x, y, z = point
    h = cam.K @ np.array([x, y, z, 1.0])
    if h[2] <= 0.0:
        raise ValueError(f"point behind camera: projected depth {h[2]}")
    return float(h[0] / h[2]), float(h[1] / h[2]), float(h[2])


def backproject(cam, pixel):
    """Exact inverse of `project`, including the 3x4 translation column."""
    xp, yp, zp = pixel
    if zp <= 0.0:
        raise ValueError(f"non-positive projected depth {zp}")
    rhs = zp * np.array([xp, yp, 1.0]) - cam.K[:, 3]
    p = np.linalg.solve(cam.K[:, :3], rhs)
    return float(p[0]), float(p[1]), float(p[2])


def alpha_to_yaw(alpha, x, z):
    """Observation angle to global yaw: A = alpha + atan2(x, z), wrapped."""
    if z <= 0.0:
        raise ValueError(f"need z > 0 for the viewing-ray angle, got {z}")
    return wrap_angle(alpha + math.atan2(x, z))


def yaw_to_alpha(yaw, x, z):
    if z <= 0.0:
        raise ValueError(f"need z > 0 for the viewing-ray angle, got {z}")
    return wrap_angle(yaw - math.atan2(x, z))


def box3d_corners(box):
    """8 corners, (8, 3). Bottom face at y, top face at y - h; yaw about y."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    lx = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (box.l / 2.0)
    ly = np.array([0, 0, 0, 0, -1, -1, -1, -1]) * box.h
    lz = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * (box.w / 2.0)
    local = np.stack([lx, ly, lz], axis=1)
    return local @ rot.T + np.array([box.x, box.y, box.z])


def project_box(box, cam):
    """Axis-aligned image envelope of the 8 projected corners."""
    pts = box3d_corners(box)
    if np.any(pts[:, 2] <= 0.0):
        raise ValueError("box extends behind the camera")
    proj = np.array([project(cam, p) for p in pts])
    return Box2D(proj[:, 0].min(), proj[:, 1].min(), proj[:, 0].max(), proj[:, 1].max())


# -- IoU ----------------------------------------------------------------------


def iou_2d(a, b):
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0.0 else 0.0


def bev_footprint(box):
    """Yaw-rotated (x, z) rectangle corners of a Box3D, (4, 2), CCW."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = np.array([1, 1, -1, -1]) * (box.l / 2.0)
    lz = np.array([1, -1, -1, 1]) * (box.w / 2.0)
    x = box.x + lx * c + lz * s
    z = box.z - lx * s + lz * c
    return np.stack([x, z], axis=1)


def polygon_area(poly):
    """Shoelace area (absolute)."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_polygon(subject, clip):
    """Sutherland-Hodgman: clip `subject` by convex polygon `clip` (CCW)."""
    def inside(p, a, b):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0

    def intersect(p, q, a, b):
        # line p-q with line a-b
        d1 = np.asarray(q) - np.asarray(p)
        d2 = np.asarray(b) - np.asarray(a)
        denom = d1[0] * d2[1] - d1[1] * d2[0]
        t = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / denom
        return (p[0] + t * d1[0], p[1] + t * d1[1])

    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        inp, output = output, []
        if not inp:
            break
        prev = inp[-1]
        for cur in inp:
            if inside(cur, a, b):
                if not inside(prev, a, b):
                    output.append(intersect(prev, cur, a, b))
                output.append(cur)
            elif inside(prev, a, b):
                output.append(intersect(prev, cur, a, b))
            prev = cur
    return output


def _ccw(poly):
    p = np.asarray(poly)
    signed = 0.5 * (np.dot(p[:, 0], np.roll(p[:, 1], -1)) - np.dot(np.roll(p[:, 0], -1), p[:, 1]))
    return poly if signed >= 0 else poly[::-1]


def iou_bev(a, b):
    """Rotated-footprint IoU on the ground plane via polygon clipping."""
    pa = _ccw(bev_footprint(a))
    pb = _ccw(bev_footprint(b))
    inter = polygon_area(clip_polygon(pa, pb))
    if inter < _AREA_EPS:
        inter = 0.0
    union = a.w * a.l + b.w * b.l - inter
    return inter / union if union > 0.0 else 0.0


def iou_3d(a, b):
    """BEV intersection x vertical overlap over union volume."""
    pa = _ccw(bev_footprint(a))
    pb = _ccw(bev_footprint(b))
    inter_area = polygon_area(clip_polygon(pa, pb))
    if inter_area < _AREA_EPS:
        inter_area = 0.0
    # bottom at y, top at y - h (camera y points down)
    y_overlap = max(0.0, min(a.y, b.y) - max(a.y - a.h, b.y - b.h))
    inter = inter_area * y_overlap
    union = a.w * a.h * a.l + b.w * b.h * b.l - inter
    return inter / union if union > 0.0 else 0.0

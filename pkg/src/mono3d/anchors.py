"""Anchor grid, per-template 3D statistics, and the box <-> delta codec.

Each anchor pairs a 2D template (w, h) with 3D statistics (z, w, h, l, alpha)
fitted as the mean over training objects that the template overlaps. The
codec maps between network regression outputs (deltas) and decoded 2D boxes
plus projected 3D parameters, and is an exact algebraic inverse pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box2D, iou_2d, wrap_angle

__all__ = [
    "Anchor",
    "BoxDeltas",
    "AnchorGrid",
    "default_sizes",
    "generate_anchor_grid",
    "fit_anchor_3d_stats",
    "encode",
    "decode",
    "save_anchor_stats",
    "load_anchor_stats",
]

DEFAULT_RATIOS = (0.5, 1.0, 1.5)


def default_sizes(count=12, base=24.0, top_factor=12.0):
    """Exponential size ladder base * factor^(i/(count-1)), 24 .. 288 by default."""
    i = np.arange(count)
    return base * top_factor ** (i / (count - 1))


@dataclass
class Anchor:
    """One anchor instance: pixel center, 2D template, fitted 3D statistics."""

    x: float
    y: float
    w2d: float
    h2d: float
    stats3d: np.ndarray = field(default_factory=lambda: np.zeros(5))  # z, w, h, l, alpha
    template: int = 0

    def box2d(self):
        return Box2D.from_center(self.x, self.y, self.w2d, self.h2d)


@dataclass
class BoxDeltas:
    """Regression targets/outputs: (tx, ty, tw, th) 2D and
    (tx, ty, tz, tw, th, tl, ta) 3D."""

    d2: np.ndarray
    d3: np.ndarray

    def __post_init__(self):
        self.d2 = np.asarray(self.d2, dtype=np.float64)
        self.d3 = np.asarray(self.d3, dtype=np.float64)
        if self.d2.shape != (4,) or self.d3.shape != (7,):
            raise ValueError(f"deltas must be (4,), (7,), got {self.d2.shape}, {self.d3.shape}")
        if not (np.all(np.isfinite(self.d2)) and np.all(np.isfinite(self.d3))):
            raise ValueError("non-finite deltas")


class AnchorGrid:
    """All anchors of a feature grid, stored as flat arrays.

    Flat index = (row * W + col) * A + template; templates iterate sizes
    (slowest) then aspect ratios.
    """

    def __init__(self, feature_hw, stride, templates, stats3d=None):
        self.feature_hw = tuple(feature_hw)
        self.stride = int(stride)
        self.templates = np.asarray(templates, dtype=np.float64)  # (A, 2) as (w, h)
        A = len(self.templates)
        self.stats3d = np.zeros((A, 5)) if stats3d is None else np.asarray(stats3d, float)
        H, W = self.feature_hw
        ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        self.centers = np.stack(
            [xs * stride + stride / 2.0, ys * stride + stride / 2.0], axis=-1
        ).reshape(-1, 2)  # (H*W, 2) pixel (x, y)

    @property
    def per_position(self):
        return len(self.templates)

    def __len__(self):
        return self.centers.shape[0] * self.per_position

    def anchor(self, flat_index):
        A = self.per_position
        pos, t = divmod(flat_index, A)
        cx, cy = self.centers[pos]
        w, h = self.templates[t]
        return Anchor(cx, cy, w, h, self.stats3d[t], template=t)

    def boxes2d(self):
        """(len, 4) corner boxes for every anchor."""
        A = self.per_position
        c = np.repeat(self.centers, A, axis=0)
        wh = np.tile(self.templates, (self.centers.shape[0], 1))
        return np.concatenate([c - wh / 2.0, c + wh / 2.0], axis=1)


def generate_anchor_grid(feature_hw, stride=8, sizes=None, ratios=DEFAULT_RATIOS):
    """Size x ratio template bank tiled over the grid, centers at cell centers.

    Ratio r maps a scale s to (w, h) = (s / sqrt(r), s * sqrt(r)), which keeps
    the area s^2 independent of r.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    sizes = default_sizes() if sizes is None else np.asarray(sizes, dtype=np.float64)
    templates = []
    for s in sizes:
        for r in ratios:
            templates.append((s / math.sqrt(r), s * math.sqrt(r)))
    return AnchorGrid(feature_hw, stride, templates)


def fit_anchor_3d_stats(grid, objects, iou_thresh=0.5):
    """Fill each template's 3D stats with the mean over overlapping objects.

    An object contributes to a template when any anchor of that template has
    2D IoU >= iou_thresh with it. Templates that match nothing inherit the
    global mean so every anchor stays decodable.
    objects: iterable of (Box2D, (z, w, h, l, alpha)).
    """
    objects = list(objects)
    if not objects:
        raise ValueError("cannot fit anchor statistics from an empty label set")
    boxes = np.array([b.as_array() for b, _ in objects])
    params = np.array([p for _, p in objects], dtype=np.float64)
    if params.shape[1] != 5:
        raise ValueError("3D parameters must be (z, w, h, l, alpha)")

    anchor_boxes = grid.boxes2d()
    A = grid.per_position
    global_mean = params.mean(axis=0)
    stats = np.tile(global_mean, (A, 1))
    for t in range(A):
        tb = anchor_boxes[t::A]  # all anchors of this template
        ix = np.maximum(0.0, np.minimum(tb[:, None, 2], boxes[None, :, 2])
                        - np.maximum(tb[:, None, 0], boxes[None, :, 0]))
        iy = np.maximum(0.0, np.minimum(tb[:, None, 3], boxes[None, :, 3])
                        - np.maximum(tb[:, None, 1], boxes[None, :, 1]))
        inter = ix * iy
        area_a = (tb[:, 2] - tb[:, 0]) * (tb[:, 3] - tb[:, 1])
        area_b = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        union = area_a[:, None] + area_b[None, :] - inter
        iou = np.where(union > 0.0, inter / union, 0.0)
        matched = (iou >= iou_thresh).any(axis=0)
        if matched.any():
            stats[t] = params[matched].mean(axis=0)
    grid.stats3d = stats
    return grid


def decode(anchor, deltas):
    """Deltas -> (Box2D, projected 3D params (xp, yp, zp, w, h, l, angle)).

    2D/3D centers shift by delta * template size; 2D/3D dimensions scale by
    exp(delta); projected depth and angle are additive, angle wrapped to
    (-pi, pi].
    """
    tx, ty, tw, th = deltas.d2
    w, h = anchor.w2d, anchor.h2d
    box2d = Box2D.from_center(tx * w + anchor.x, ty * h + anchor.y,
                              math.exp(tw) * w, math.exp(th) * h)
    z0, w0, h0, l0, a0 = anchor.stats3d
    tx3, ty3, tz3, tw3, th3, tl3, ta3 = deltas.d3
    params3d = (
        tx3 * w + anchor.x,
        ty3 * h + anchor.y,
        tz3 + z0,
        math.exp(tw3) * w0,
        math.exp(th3) * h0,
        math.exp(tl3) * l0,
        wrap_angle(ta3 + a0),
    )
    return box2d, params3d


def encode(anchor, box2d, params3d):
    """Exact inverse of `decode`. Ground-truth sizes must be positive."""
    if box2d.w <= 0.0 or box2d.h <= 0.0:
        raise ValueError("ground-truth 2D box must have positive size")
    cx, cy = box2d.center
    w, h = anchor.w2d, anchor.h2d
    d2 = np.array([
        (cx - anchor.x) / w,
        (cy - anchor.y) / h,
        math.log(box2d.w / w),
        math.log(box2d.h / h),
    ])
    z0, w0, h0, l0, a0 = anchor.stats3d
    xp, yp, zp, w3, h3, l3, ang = params3d
    if w3 <= 0.0 or h3 <= 0.0 or l3 <= 0.0:
        raise ValueError("ground-truth 3D dimensions must be positive")
    d3 = np.array([
        (xp - anchor.x) / w,
        (yp - anchor.y) / h,
        zp - z0,
        math.log(w3 / w0),
        math.log(h3 / h0),
        math.log(l3 / l0),
        wrap_angle(ang - a0),
    ])
    return BoxDeltas(d2, d3)


def save_anchor_stats(grid, path):
    """One template per line: index, w2d, h2d, z, w, h, l, alpha."""
    with open(path, "w") as f:
        f.write("# template w2d h2d z3d w3d h3d l3d alpha\n")
        for t, ((w, h), s) in enumerate(zip(grid.templates, grid.stats3d)):
            vals = " ".join(format(v, ".9g") for v in (w, h, *s))
            f.write(f"{t} {vals}\n")


def load_anchor_stats(grid, path):
    templates, stats = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"expected 8 fields per template line, got {len(parts)}")
            templates.append([float(parts[1]), float(parts[2])])
            stats.append([float(v) for v in parts[3:]])
    templates, stats = np.array(templates), np.array(stats)
    if templates.shape != grid.templates.shape:
        raise ValueError("stats table does not match the grid's template bank")
    grid.templates = templates
    grid.stats3d = stats
    return grid

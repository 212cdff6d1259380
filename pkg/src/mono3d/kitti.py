"""KITTI calibration / label / result file parsing and writing.

Label lines carry 15 whitespace-separated fields (16 with a trailing score):
type, truncation, occlusion, alpha, 2D box (x1 y1 x2 y2), dimensions
(h w l), location (x y z), rotation_y [, score]. Calibration files map names
like "P2" to 3x4 matrices given as 12 floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box2D, Box3D, CameraIntrinsics

__all__ = [
    "LabelRecord",
    "parse_label_line",
    "parse_label_file",
    "parse_calib",
    "format_label",
    "write_result_file",
    "detection_to_record",
]


@dataclass
class LabelRecord:
    type: str
    truncation: float
    occlusion: int
    alpha: float
    box2d: tuple  # x1, y1, x2, y2
    dims: tuple   # h, w, l
    location: tuple  # x, y, z
    rotation_y: float
    score: float = None

    def as_box2d(self):
        return Box2D(*self.box2d)

    def as_box3d(self):
        h, w, l = self.dims
        x, y, z = self.location
        return Box3D(x, y, z, w, h, l, self.rotation_y, alpha=self.alpha)


def _num(field_str, line_no, field_no):
    try:
        v = float(field_str)
    except ValueError:
        raise ValueError(f"line {line_no}, field {field_no}: not numeric: {field_str!r}")
    if not np.isfinite(v):
        raise ValueError(f"line {line_no}, field {field_no}: non-finite value {field_str!r}")
    return v


def parse_label_line(line, line_no=1):
    parts = line.split()
    if len(parts) not in (15, 16):
        raise ValueError(f"line {line_no}: expected 15 or 16 fields, got {len(parts)}")
    f = [parts[0]] + [_num(p, line_no, i + 2) for i, p in enumerate(parts[1:])]
    return LabelRecord(
        type=f[0],
        truncation=f[1],
        occlusion=int(f[2]),
        alpha=f[3],
        box2d=(f[4], f[5], f[6], f[7]),
        dims=(f[8], f[9], f[10]),
        location=(f[11], f[12], f[13]),
        rotation_y=f[14],
        score=f[15] if len(parts) == 16 else None,
    )


def parse_label_file(path):
    records = []
    with open(path, newline="") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if line:
                records.append(parse_label_line(line, line_no=i))
    return records


def parse_calib(path):
    """All named 3x4 matrices in a calib file, e.g. {"P2": CameraIntrinsics}."""
    matrices = {}
    with open(path, newline="") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line or ":" not in line:
                continue
            name, rest = line.split(":", 1)
            vals = rest.split()
            if len(vals) != 12:
                continue  # R0_rect and friends are 3x3; only 3x4 entries matter here
            mat = np.array([_num(v, i, j + 2) for j, v in enumerate(vals)]).reshape(3, 4)
            matrices[name.strip()] = mat
    if "P2" not in matrices:
        raise ValueError(f"{path}: no P2 projection matrix found")
    return {name: CameraIntrinsics(m) if name.startswith("P") else m
            for name, m in matrices.items()}


def format_label(rec):
    """Result-format line: boxes at 2 decimals, angles/scores at 6."""
    parts = [
        rec.type,
        f"{rec.truncation:.2f}",
        str(int(rec.occlusion)),
        f"{rec.alpha:.6f}",
        *(f"{v:.2f}" for v in rec.box2d),
        *(f"{v:.2f}" for v in rec.dims),
        *(f"{v:.2f}" for v in rec.location),
        f"{rec.rotation_y:.6f}",
    ]
    if rec.score is not None:
        parts.append(f"{rec.score:.6f}")
    return " ".join(parts)


def detection_to_record(det, class_names):
    b3 = det.box3d
    return LabelRecord(
        type=class_names[det.class_id],
        truncation=0.0,
        occlusion=0,
        alpha=det.alpha,
        box2d=(det.box2d.x1, det.box2d.y1, det.box2d.x2, det.box2d.y2),
        dims=(b3.h, b3.w, b3.l),
        location=(b3.x, b3.y, b3.z),
        rotation_y=b3.yaw,
        score=det.score,
    )


def write_result_file(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for rec in records:
            f.write(format_label(rec) + "\n")

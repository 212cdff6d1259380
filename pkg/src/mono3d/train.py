"""Toy end-to-end trainer: stand-in backbone, aligned heads, SGD schedule.

The stand-in backbone is three stride-2 convolutions reaching stride 8; the
heads mirror the full design (classification, 2D box, predicted-center
alignment, attention-based depth, 3D dims/angle) at desk scale, trained on
synthetic rectangle scenes with a fixed seed so runs are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .align import align_conv, center_align_offsets, select_best_anchor, shape_align_offsets
from .anchors import encode, fit_anchor_3d_stats, generate_anchor_grid
from .attention import AnabParams, PyramidSpec, anab_forward
from .geometry import Box2D, CameraIntrinsics
from .losses import LossConfig, loss_2d, loss_3d, loss_cls, mine_hard, per_sample_ce, total_loss
from .ops import ConvSpec, conv2d
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "lr_at",
    "SGD",
    "Scene",
    "make_synthetic_scenes",
    "ToyDetector",
    "train_toy",
    "write_loss_trace",
]

STRIDE = 8


@dataclass
class TrainConfig:
    lr_target: float = 0.004
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    lr_floor: float = 4e-8
    warmup_steps: int = 20
    total_steps: int = 200

    def __post_init__(self):
        for name in ("lr_target", "momentum", "weight_decay", "batch_size",
                     "lr_floor", "warmup_steps", "total_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def lr_at(step, config):
    """Linear warmup from 0 to lr_target, then cosine decay to lr_floor.

    step 0 gives 0; step == warmup_steps gives exactly lr_target; the final
    step gives exactly lr_floor.
    """
    w, total = config.warmup_steps, config.total_steps
    if step <= w:
        return config.lr_target * step / w
    t = (step - w) / (total - w)
    return config.lr_floor + 0.5 * (config.lr_target - config.lr_floor) * (1.0 + math.cos(math.pi * t))


class SGD:
    """SGD with momentum and decoupled-from-nothing classic weight decay."""

    def __init__(self, params, config):
        self.params = list(params)
        self.config = config
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        c = self.config
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v *= c.momentum
            v += g + c.weight_decay * p.data
            p.data -= lr * v


# -- synthetic scenes ---------------------------------------------------------


@dataclass
class Scene:
    image: Tensor                  # (1, 3, H, W)
    boxes2d: list                  # list of Box2D
    params3d: np.ndarray           # (n, 7): xp, yp, zp, w, h, l, alpha
    cam: CameraIntrinsics


def make_synthetic_scenes(count=8, image_hw=(48, 80), objects_per_scene=2, seed=7):
    """Rectangle scenes: each object is a bright box on a noisy background.

    Object depth follows a pinhole-ish size/depth relation so the depth head
    has signal to learn; projected centers coincide with the 2D box centers.
    """
    rng = np.random.default_rng(seed)
    H, W = image_hw
    cam = CameraIntrinsics.simple(60.0, W / 2.0, H / 2.0)
    scenes = []
    for _ in range(count):
        img = rng.normal(0.0, 0.05, size=(1, 3, H, W))
        boxes, params = [], []
        for _ in range(objects_per_scene):
            bw = rng.uniform(14.0, 34.0)
            bh = bw * rng.uniform(0.8, 1.2)
            cx = rng.uniform(bw / 2 + 2, W - bw / 2 - 2)
            cy = rng.uniform(bh / 2 + 2, H - bh / 2 - 2)
            box = Box2D.from_center(cx, cy, bw, bh)
            shade = rng.uniform(0.6, 1.0, size=3)
            img[0, :, int(box.y1):int(box.y2), int(box.x1):int(box.x2)] += shade[:, None, None]
            z = 60.0 * 1.6 / bh  # apparent height ~ f * H3d / z
            w3 = rng.uniform(1.5, 1.8)
            h3 = rng.uniform(1.3, 1.6)
            l3 = rng.uniform(3.2, 4.2)
            alpha = rng.uniform(-0.4, 0.4)
            boxes.append(box)
            params.append((cx, cy, z, w3, h3, l3, alpha))
        scenes.append(Scene(Tensor(img), boxes, np.array(params), cam))
    return scenes


# -- toy detector -------------------------------------------------------------


@dataclass
class ToyDetectorConfig:
    image_channels: int = 3
    feat_channels: int = 16
    num_fg_classes: int = 1
    anchor_sizes: tuple = (16.0, 24.0, 36.0)
    anchor_ratios: tuple = (0.5, 1.0, 1.5)
    pyramid_levels: tuple = (1, 2)
    center_source: str = "3d"  # which center prediction drives alignment
    head_scale: float = 8.0    # fixed output gain; raises effective head lr


class ToyDetector:
    """Stride-8 backbone + aligned multi-task heads, all on the autodiff tape."""

    def __init__(self, image_hw, config=None, seed=0):
        self.config = config or ToyDetectorConfig()
        c = self.config
        rng = np.random.default_rng(seed)
        self.image_hw = tuple(image_hw)
        self.feature_hw = (image_hw[0] // STRIDE, image_hw[1] // STRIDE)
        self.grid = generate_anchor_grid(
            self.feature_hw, STRIDE, sizes=np.array(c.anchor_sizes), ratios=c.anchor_ratios
        )
        A = self.grid.per_position
        self.num_classes = c.num_fg_classes + 1  # class 0 is background
        ch = c.feat_channels
        gain = np.sqrt(2.0)  # relu backbone
        self.backbone = [
            ConvSpec.init_random(c.image_channels, 8, (3, 3), 2, 1, rng=rng, gain=gain),
            ConvSpec.init_random(8, 12, (3, 3), 2, 1, rng=rng, gain=gain),
            ConvSpec.init_random(12, ch, (3, 3), 2, 1, rng=rng, gain=gain),
        ]
        # heads start at zero; their fixed output gain c.head_scale speeds learning
        self.cls_head = ConvSpec(ch, A * self.num_classes, (1, 1))
        self.shape_conv = ConvSpec.init_random(ch, ch, (3, 3), 1, 1, rng=rng)
        self.center_head = ConvSpec(ch, 2, (1, 1))
        self.center_conv = ConvSpec.init_random(ch, ch, (1, 1), rng=rng)
        self.box2d_head = ConvSpec(ch, A * 4, (1, 1))
        self.box3d_head = ConvSpec(ch, A * 4, (1, 1))  # tw, th, tl, ta
        self.anab = AnabParams.init_random(ch, pyramid=PyramidSpec(list(c.pyramid_levels)), rng=rng)
        self.depth_head = ConvSpec(ch, A * 1, (1, 1))

    def fit_anchors(self, scenes):
        objects = []
        for sc in scenes:
            for box, p in zip(sc.boxes2d, sc.params3d):
                objects.append((box, (p[2], p[3], p[4], p[5], p[6])))
        fit_anchor_3d_stats(self.grid, objects)

    def params(self):
        out = []
        for spec in (*self.backbone, self.cls_head, self.shape_conv, self.center_head,
                     self.center_conv, self.box2d_head, self.box3d_head, self.depth_head):
            out.extend(spec.params())
        out.extend(self.anab.params())
        return out

    def forward(self, image):
        """Returns per-head tensors plus the (h_a, w_a) map used for alignment."""
        c = self.config
        x = image
        for spec in self.backbone:
            x = conv2d(x, spec).relu()
        H, W = self.feature_hw
        A = self.grid.per_position

        s = c.head_scale
        cls_out = conv2d(x, self.cls_head) * s  # (1, A*ncls, H, W)
        # shape alignment from the sigmoid foreground confidence, one shot
        fg = cls_out.data[0].reshape(A, self.num_classes, H, W)[:, 1:, :, :].max(axis=1)
        scores = 1.0 / (1.0 + np.exp(-fg)).transpose(1, 2, 0)  # (H, W, A)
        best_hw = select_best_anchor(scores, self.grid.templates)
        trunk = align_conv(x, self.shape_conv, shape_align_offsets(best_hw, STRIDE, (3, 3))).relu()

        # predicted-center residual in pixels, normalized by the best template
        center_out = conv2d(trunk, self.center_head)  # (1, 2, H, W)
        best_wh_t = Tensor(best_hw[..., ::-1].copy())  # (H, W, 2) as (w_a, h_a)
        residuals = center_out[0].transpose(1, 2, 0) * best_wh_t
        aligned = align_conv(trunk, self.center_conv, center_align_offsets(residuals, STRIDE, (1, 1))).relu()

        depth_feat = anab_forward(aligned, self.anab)
        return {
            "cls": cls_out,
            "center": center_out,
            "box2d": conv2d(aligned, self.box2d_head) * s,
            "box3d": conv2d(aligned, self.box3d_head) * s,
            "depth": conv2d(depth_feat, self.depth_head) * s,
            "attention_conv": self.anab.attention,
            "best_hw": best_hw,
            "features": aligned,
        }

    # -- loss assembly --------------------------------------------------------

    def match_anchors(self, boxes2d, loss_cfg):
        """Per-anchor labels: gt index for positives, -1 background, -2 ignore."""
        anchor_boxes = self.grid.boxes2d()
        gt = np.array([b.as_array() for b in boxes2d])
        ix = np.maximum(0.0, np.minimum(anchor_boxes[:, None, 2], gt[None, :, 2])
                        - np.maximum(anchor_boxes[:, None, 0], gt[None, :, 0]))
        iy = np.maximum(0.0, np.minimum(anchor_boxes[:, None, 3], gt[None, :, 3])
                        - np.maximum(anchor_boxes[:, None, 1], gt[None, :, 1]))
        inter = ix * iy
        aa = (anchor_boxes[:, 2] - anchor_boxes[:, 0]) * (anchor_boxes[:, 3] - anchor_boxes[:, 1])
        ga = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
        iou = inter / (aa[:, None] + ga[None, :] - inter)
        best_gt = iou.argmax(axis=1)
        best_iou = iou[np.arange(len(anchor_boxes)), best_gt]
        labels = np.full(len(anchor_boxes), -2, dtype=np.intp)
        labels[best_iou < loss_cfg.negative_iou] = -1
        pos = best_iou >= loss_cfg.positive_iou
        labels[pos] = best_gt[pos]
        return labels

    def _gather(self, head_out, k, flat_pos):
        """Rows of a (1, A*k, H, W) head at flat anchor indices, -> (n, k)."""
        H, W = self.feature_hw
        A = self.grid.per_position
        pos, tmpl = np.divmod(flat_pos, A)
        hh, ww = np.divmod(pos, W)
        chan = tmpl[:, None] * k + np.arange(k)[None, :]
        return head_out[0][(chan, hh[:, None], ww[:, None])]

    def scene_loss(self, scene, loss_cfg):
        """Mined classification + 2D IoU + 3D smooth-L1 losses for one scene."""
        heads = self.forward(scene.image)
        labels = self.match_anchors(scene.boxes2d, loss_cfg)
        pos_idx = np.flatnonzero(labels >= 0)
        neg_idx = np.flatnonzero(labels == -1)
        used = np.concatenate([pos_idx, neg_idx])

        H, W = self.feature_hw
        A = self.grid.per_position
        ncls = self.num_classes
        logits_all = self._gather(heads["cls"], ncls, used)
        targets_all = np.where(labels[used] >= 0, 1, 0)

        # hard-negative mining on detached per-sample CE; positives protected
        ce = per_sample_ce(logits_all.data, targets_all)
        keep = mine_hard(ce, loss_cfg.hard_fraction, protected=np.arange(len(pos_idx)))
        l_cls = loss_cls(logits_all[keep], targets_all[keep])

        if len(pos_idx) == 0:
            zero = Tensor(0.0)
            return l_cls, zero, zero, heads

        d2 = self._gather(heads["box2d"], 4, pos_idx)           # tx, ty, tw, th
        d3_rest = self._gather(heads["box3d"], 4, pos_idx)      # tw, th, tl, ta
        tz = self._gather(heads["depth"], 1, pos_idx)           # tz

        _, tmpl = np.divmod(pos_idx, A)
        grid_pos = pos_idx // A
        centers = self.grid.centers[grid_pos]
        wh = self.grid.templates[tmpl]
        stats = self.grid.stats3d[tmpl]

        # decoded 2D corners, on tape
        cx = d2[:, 0] * wh[:, 0] + centers[:, 0]
        cy = d2[:, 1] * wh[:, 1] + centers[:, 1]
        bw = d2[:, 2].exp() * wh[:, 0]
        bh = d2[:, 3].exp() * wh[:, 1]
        pred_boxes = Tensor.concat(
            [(cx - bw * 0.5).reshape(-1, 1), (cy - bh * 0.5).reshape(-1, 1),
             (cx + bw * 0.5).reshape(-1, 1), (cy + bh * 0.5).reshape(-1, 1)], axis=1)
        gt_boxes = np.array([scene.boxes2d[g].as_array() for g in labels[pos_idx]])
        l_2d = loss_2d(pred_boxes, gt_boxes)

        # 3D deltas: predicted-center head supplies (tx, ty)3d per position
        hh, ww = np.divmod(grid_pos, W)
        center_px = heads["center"][0][(np.arange(2)[None, :].repeat(len(pos_idx), 0),
                                        hh[:, None], ww[:, None])]
        best_wh = heads["best_hw"][hh, ww][:, ::-1]  # (w_a, h_a) of best template
        tx3 = center_px[:, 0] * Tensor(best_wh[:, 0] / wh[:, 0])
        ty3 = center_px[:, 1] * Tensor(best_wh[:, 1] / wh[:, 1])
        pred_d3 = Tensor.concat(
            [tx3.reshape(-1, 1), ty3.reshape(-1, 1), tz, d3_rest], axis=1)

        targets_d3 = []
        from .anchors import BoxDeltas  # local import to avoid cycle at module load
        for a_idx, g in zip(pos_idx, labels[pos_idx]):
            anc = self.grid.anchor(a_idx)
            deltas = encode(anc, scene.boxes2d[g], scene.params3d[g])
            targets_d3.append(deltas.d3)
        l_3d = loss_3d(pred_d3, np.array(targets_d3))
        return l_cls, l_2d, l_3d, heads


def train_toy(scenes, steps=200, train_cfg=None, loss_cfg=None, seed=0, detector=None):
    """SGD over the full head stack on synthetic scenes; returns the trace.

    Trace rows: (step, lr, L_cls, L_2d, L_3d, L_total), evaluated on the
    mini-batch before the update. Deterministic for a fixed seed.
    """
    train_cfg = train_cfg or TrainConfig(total_steps=steps)
    loss_cfg = loss_cfg or LossConfig()
    H, W = scenes[0].image.shape[2:]
    model = detector or ToyDetector((H, W), seed=seed)
    model.fit_anchors(scenes)
    opt = SGD(model.params(), train_cfg)

    trace = []
    for step in range(steps):
        lr = lr_at(step + 1, train_cfg)
        batch = [scenes[(step * train_cfg.batch_size + i) % len(scenes)]
                 for i in range(train_cfg.batch_size)]
        opt.zero_grad()
        parts = np.zeros(3)
        batch_total = None
        for sc in batch:
            l_cls, l_2d, l_3d, _ = model.scene_loss(sc, loss_cfg)
            tot = total_loss(l_cls, l_2d, l_3d, loss_cfg) * (1.0 / len(batch))
            batch_total = tot if batch_total is None else batch_total + tot
            parts += [l_cls.item(), l_2d.item(), l_3d.item()]
        parts /= len(batch)
        batch_total.backward()
        trace.append((step, lr, parts[0], parts[1], parts[2], float(batch_total.item())))
        opt.step(lr)
    return trace, model


def write_loss_trace(trace, path):
    with open(path, "w") as f:
        f.write("step,lr,loss_cls,loss_2d,loss_3d,loss_total\n")
        for row in trace:
            f.write(",".join(format(v, ".9g") for v in row) + "\n")

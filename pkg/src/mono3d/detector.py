"""End-to-end inference and a small fit/predict estimator wrapper.

`detect` turns raw head outputs into scored Detections (decode, back-project,
angle conversion); `ToyPipeline` wraps the toy trainer and detector behind a
scikit-learn-style fit/predict/get_params surface.
"""

from __future__ import annotations

import inspect

import numpy as np

from .anchors import BoxDeltas, decode
from .geometry import Box3D, alpha_to_yaw, backproject
from .postproc import Detection, confidence_filter, nms, optimize_rotation
from .train import (LossConfig, Scene, ToyDetector, ToyDetectorConfig, TrainConfig,
                    make_synthetic_scenes, train_toy)

__all__ = ["detect", "ToyPipeline"]


def detect(model, scene, score_floor=0.1, nms_iou=0.4, conf_thresh=0.75,
           refine_rotation=True):
    """Full inference for one scene: decode, NMS, filter, yaw refinement."""
    heads = model.forward(scene.image)
    H, W = model.feature_hw
    A = model.grid.per_position
    ncls = model.num_classes

    logits = heads["cls"].data[0].reshape(A, ncls, H, W)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    fg = probs[:, 1:, :, :]
    score_map = fg.max(axis=1)          # (A, H, W)
    class_map = fg.argmax(axis=1) + 1

    d2_map = heads["box2d"].data[0].reshape(A, 4, H, W)
    d3rest_map = heads["box3d"].data[0].reshape(A, 4, H, W)
    tz_map = heads["depth"].data[0].reshape(A, 1, H, W)
    center_map = heads["center"].data[0]  # (2, H, W), pixel units after scaling
    best_hw = heads["best_hw"]

    dets = []
    for t, hh, ww in zip(*np.nonzero(score_map >= score_floor)):
        flat = (hh * W + ww) * A + t
        anchor = model.grid.anchor(flat)
        w_b, h_b = best_hw[hh, ww, 1], best_hw[hh, ww, 0]
        d3 = np.array([
            center_map[0, hh, ww] * w_b / anchor.w2d,
            center_map[1, hh, ww] * h_b / anchor.h2d,
            tz_map[t, 0, hh, ww],
            *d3rest_map[t, :, hh, ww],
        ])
        box2d, (xp, yp, zp, w3, h3, l3, alpha) = decode(
            anchor, BoxDeltas(d2_map[t, :, hh, ww], d3))
        if zp <= 0.0:
            continue
        x, y, z = backproject(scene.cam, (xp, yp, zp))
        yaw = alpha_to_yaw(alpha, x, z)
        box3d = Box3D(x, y, z, w3, h3, l3, yaw, alpha=alpha)
        dets.append(Detection(int(class_map[t, hh, ww]), float(score_map[t, hh, ww]),
                              box2d, box3d, alpha))

    dets = nms(dets, iou_thresh=nms_iou)
    dets = confidence_filter(dets, thresh=conf_thresh)
    if refine_rotation:
        dets = [optimize_rotation(d, scene.cam)[0] for d in dets]
    return dets


class ToyPipeline:
    """fit/predict wrapper over the synthetic-scene trainer.

    Parameters mirror the training and post-processing knobs; get_params /
    set_params follow the scikit-learn convention so the pipeline composes
    with grid-search style tooling.
    """

    def __init__(self, steps=200, seed=0, lr_target=0.004, momentum=0.9,
                 weight_decay=5e-4, batch_size=4, conf_thresh=0.75,
                 nms_iou=0.4, refine_rotation=True):
        self.steps = steps
        self.seed = seed
        self.lr_target = lr_target
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.conf_thresh = conf_thresh
        self.nms_iou = nms_iou
        self.refine_rotation = refine_rotation
        self.model_ = None
        self.trace_ = None

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"unknown parameter {name!r} for ToyPipeline")
            setattr(self, name, value)
        return self

    def _check_scenes(self, scenes):
        scenes = list(scenes)
        if not scenes:
            raise ValueError("need at least one scene")
        shape = scenes[0].image.shape
        for sc in scenes:
            if sc.image.shape != shape:
                raise ValueError("all scenes must share one image shape")
        return scenes

    def fit(self, scenes):
        scenes = self._check_scenes(scenes)
        cfg = TrainConfig(
            lr_target=self.lr_target, momentum=self.momentum,
            weight_decay=self.weight_decay, batch_size=self.batch_size,
            total_steps=self.steps,
            warmup_steps=max(1, len(scenes) // self.batch_size),
        )
        self.trace_, self.model_ = train_toy(
            scenes, steps=self.steps, train_cfg=cfg, seed=self.seed)
        return self

    def predict(self, scenes):
        if self.model_ is None:
            raise RuntimeError("call fit before predict")
        scenes = self._check_scenes(scenes)
        return [detect(self.model_, sc, nms_iou=self.nms_iou,
                       conf_thresh=self.conf_thresh,
                       refine_rotation=self.refine_rotation)
                for sc in scenes]

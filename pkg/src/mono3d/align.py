"""Shape/center feature alignment and the offset-sampled convolution.

Shape alignment spreads the sampling taps to cover the best-scoring anchor's
extent; center alignment shifts all taps toward the predicted object center.
Both feed `align_conv`, a convolution that reads its taps at fractional
positions via bilinear interpolation. With an all-zero offset field,
align_conv is bit-identical to conv2d.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import ConvSpec, gather_bilinear
from .tensor import Tensor

__all__ = [
    "OffsetField",
    "shape_align_offsets",
    "select_best_anchor",
    "center_align_offsets",
    "align_conv",
    "export_offsets_csv",
]


@dataclass
class OffsetField:
    """Per-position per-tap (dy, dx) offsets in feature-grid units.

    offsets: Tensor of shape (H, W, kh*kw, 2); may live on the autodiff tape
    when the offsets come from a predicted-center head.
    """

    offsets: Tensor
    kernel: tuple

    def __post_init__(self):
        kh, kw = self.kernel
        H, W, K, two = self.offsets.shape
        if K != kh * kw or two != 2:
            raise ValueError(
                f"offset field {self.offsets.shape} does not match kernel {self.kernel}"
            )
        if not np.all(np.isfinite(self.offsets.data)):
            raise ValueError("offset field contains non-finite values")

    @staticmethod
    def zeros(hw, kernel):
        kh, kw = kernel
        return OffsetField(Tensor(np.zeros((hw[0], hw[1], kh * kw, 2))), kernel)


def shape_align_offsets(best_anchor_hw, stride, kernel=(3, 3)):
    """Offsets spreading the kernel taps over the best anchor's footprint.

    best_anchor_hw: (H, W, 2) array of (h_a, w_a) per position. Tap (i, j)
    gets dy = (h_a/(S*kh) - 1) * (i - kh/2 + 0.5) and the analogous dx.
    """
    hw = np.asarray(best_anchor_hw, dtype=np.float64)
    if np.any(hw <= 0.0):
        raise ValueError("anchor sizes must be positive")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kh, kw = kernel
    H, W = hw.shape[:2]
    h_a, w_a = hw[..., 0], hw[..., 1]
    i_idx = np.arange(kh) - kh / 2.0 + 0.5
    j_idx = np.arange(kw) - kw / 2.0 + 0.5
    dy = (h_a / (stride * kh) - 1.0)[..., None] * i_idx[None, None, :]  # (H, W, kh)
    dx = (w_a / (stride * kw) - 1.0)[..., None] * j_idx[None, None, :]  # (H, W, kw)
    off = np.empty((H, W, kh * kw, 2))
    off[..., 0] = np.repeat(dy, kw, axis=-1)
    off[..., 1] = np.tile(dx, kh)
    return OffsetField(Tensor(off), kernel)


def select_best_anchor(cls_scores, anchor_sizes_2d):
    """Per-position (h_a, w_a) of the highest-scoring anchor.

    cls_scores: (H, W, A) confidence per anchor template; ties resolve to the
    lowest template index (numpy argmax convention).
    anchor_sizes_2d: (A, 2) array of (w, h) templates.
    """
    scores = np.asarray(cls_scores, dtype=np.float64)
    sizes = np.asarray(anchor_sizes_2d, dtype=np.float64)
    if sizes.ndim != 2 or sizes.shape[0] == 0:
        raise ValueError("need at least one anchor template")
    if scores.shape[-1] != sizes.shape[0]:
        raise ValueError(
            f"{scores.shape[-1]} score channels vs {sizes.shape[0]} anchor templates"
        )
    best = np.argmax(scores, axis=-1)
    out = np.empty(scores.shape[:2] + (2,))
    out[..., 0] = sizes[best, 1]  # h_a
    out[..., 1] = sizes[best, 0]  # w_a
    return out


def center_align_offsets(residuals, stride, kernel=(1, 1)):
    """Offsets moving every tap by the predicted center residual / stride.

    residuals: Tensor (H, W, 2) of (x_r, y_r) in image pixels; the resulting
    field is (y_r/S, x_r/S) replicated over all kernel taps and stays on the
    tape so offset gradients flow back into the center-regression head.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    r = residuals if isinstance(residuals, Tensor) else Tensor(residuals)
    kh, kw = kernel
    K = kh * kw
    H, W = r.shape[:2]
    off = np.empty((H, W, K, 2))
    off[..., 0] = (r.data[..., 1] / stride)[..., None]
    off[..., 1] = (r.data[..., 0] / stride)[..., None]

    def bw(g):
        g = np.asarray(g)
        gr = np.empty_like(r.data)
        gr[..., 0] = g[..., 1].sum(axis=-1) / stride
        gr[..., 1] = g[..., 0].sum(axis=-1) / stride
        r.accumulate_grad(gr)

    return OffsetField(Tensor.from_op(off, (r,), bw), kernel)


def align_conv(x, spec, field):
    """Convolution whose taps are displaced by `field` and read bilinearly.

    Stride-1, odd kernels, 'same' padding only: the offset field is defined
    on the output grid, which must coincide with the input grid. Differentiable
    in the input, the conv parameters, and the offsets.
    """
    kh, kw = spec.kernel
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"align_conv requires odd kernels, got {spec.kernel}")
    if spec.stride != 1 or spec.padding != kh // 2 or kh // 2 != kw // 2:
        raise ValueError("align_conv requires stride 1 and same-padding (k // 2)")
    if field.kernel != (kh, kw):
        raise ValueError(f"offset field kernel {field.kernel} != conv kernel {spec.kernel}")
    B, Ci, H, W = x.shape
    if Ci != spec.in_channels:
        raise ValueError(f"input has {Ci} channels, spec expects {spec.in_channels}")
    if field.offsets.shape[:2] != (H, W):
        raise ValueError(
            f"offset grid {field.offsets.shape[:2]} does not match feature grid {(H, W)}"
        )
    off = field.offsets
    ph = kh // 2
    wdat, bdat = spec.weight.data, spec.bias.data
    oh = np.arange(H)[:, None]
    ow = np.arange(W)[None, :]
    b_idx = np.arange(B)[:, None, None, None]
    c_idx = np.arange(Ci)[None, :, None, None]

    out = np.empty((B, spec.out_channels, H, W))
    out[:] = bdat[None, :, None, None]
    taps = []
    for i in range(kh):
        for j in range(kw):
            t = i * kw + j
            ys = oh + (i - ph) + off.data[:, :, t, 0]
            xs = ow + (j - ph) + off.data[:, :, t, 1]
            samp, backward = gather_bilinear(x.data, b_idx, c_idx, ys, xs)
            for ci in range(Ci):
                out += samp[:, ci][:, None] * wdat[None, :, ci, i, j, None, None]
            taps.append((t, i, j, samp, backward))

    def bw(g):
        g = np.asarray(g)
        gx = np.zeros_like(x.data) if x.requires_grad else None
        goff = np.zeros_like(off.data) if off.requires_grad else None
        gw = np.zeros_like(wdat) if spec.weight.requires_grad else None
        for t, i, j, samp, backward in taps:
            # upstream grad on the sampled values, per (b, ci, h, w)
            gsamp = np.einsum("bohw,oc->bchw", g, wdat[:, :, i, j])
            gy, gxc = backward(gsamp, gx)
            if goff is not None:
                goff[:, :, t, 0] = gy.sum(axis=(0, 1))
                goff[:, :, t, 1] = gxc.sum(axis=(0, 1))
            if gw is not None:
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, samp)
        if gx is not None:
            x.accumulate_grad(gx)
        if goff is not None:
            off.accumulate_grad(goff)
        if gw is not None:
            spec.weight.accumulate_grad(gw)
        if spec.bias.requires_grad:
            spec.bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return Tensor.from_op(out, (x, off, spec.weight, spec.bias), bw)


def export_offsets_csv(field, path):
    """One line per position: h, w, then dy,dx per tap."""
    off = field.offsets.data
    H, W, K, _ = off.shape
    with open(path, "w") as f:
        header = ["h", "w"] + [f"dy{t},dx{t}" for t in range(K)]
        f.write(",".join(header) + "\n")
        for h in range(H):
            for w in range(W):
                vals = ",".join(format(v, ".9g") for v in off[h, w].reshape(-1))
                f.write(f"{h},{w},{vals}\n")

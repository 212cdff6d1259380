"""Neural-net primitives on the autodiff tensor: conv, bilinear sampling, softmax, pooling.

conv2d accumulates taps in (kh, kw, ci) order, one tap-plane at a time, so its
floating-point summation order is identical to the naive nested-loop reference
(and to the offset-sampled convolution with all offsets zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = [
    "ConvSpec",
    "conv2d",
    "bilinear_sample",
    "gather_bilinear",
    "softmax_lastdim",
    "adaptive_avg_pool",
]


@dataclass
class ConvSpec:
    """Convolution geometry plus its learnable weight/bias tensors."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 0
    weight: Tensor = None
    bias: Tensor = None

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        wshape = (self.out_channels, self.in_channels, kh, kw)
        if self.weight is None:
            self.weight = Tensor(np.zeros(wshape), requires_grad=True)
        if tuple(self.weight.shape) != wshape:
            raise ValueError(f"weight shape {self.weight.shape} != {wshape}")
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.out_channels), requires_grad=True)
        if tuple(self.bias.shape) != (self.out_channels,):
            raise ValueError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @staticmethod
    def init_random(in_channels, out_channels, kernel=(3, 3), stride=1, padding=0, rng=None, gain=1.0):
        rng = np.random.default_rng() if rng is None else rng
        kh, kw = kernel
        fan_in = in_channels * kh * kw
        w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(out_channels, in_channels, kh, kw))
        b = np.zeros(out_channels)
        return ConvSpec(
            in_channels, out_channels, kernel, stride, padding,
            weight=Tensor(w, requires_grad=True), bias=Tensor(b, requires_grad=True),
        )

    def params(self):
        return [self.weight, self.bias]


def conv2d(x, spec):
    """Cross-correlation of a (B, Ci, H, W) tensor with `spec`, zero padding."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D input, got shape {x.shape}")
    B, Ci, H, W = x.shape
    if Ci != spec.in_channels:
        raise ValueError(f"input has {Ci} channels, spec expects {spec.in_channels}")
    kh, kw = spec.kernel
    s, p = spec.stride, spec.padding
    OH = (H + 2 * p - kh) // s + 1
    OW = (W + 2 * p - kw) // s + 1
    if OH < 1 or OW < 1:
        raise ValueError(f"empty output for input {H}x{W}, kernel {kh}x{kw}, pad {p}")

    wdat, bdat = spec.weight.data, spec.bias.data
    padded = np.zeros((B, Ci, H + 2 * p, W + 2 * p))
    padded[:, :, p:p + H, p:p + W] = x.data

    out = np.empty((B, spec.out_channels, OH, OW))
    out[:] = bdat[None, :, None, None]
    for i in range(kh):
        for j in range(kw):
            for ci in range(Ci):
                patch = padded[:, ci, i:i + OH * s:s, j:j + OW * s:s]
                out += patch[:, None] * wdat[None, :, ci, i, j, None, None]

    def bw(g):
        g = np.asarray(g)
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    for ci in range(Ci):
                        gpad[:, ci, i:i + OH * s:s, j:j + OW * s:s] += np.einsum(
                            "bohw,o->bhw", g, wdat[:, ci, i, j]
                        )
            x.accumulate_grad(gpad[:, :, p:p + H, p:p + W])
        if spec.weight.requires_grad:
            gw = np.empty_like(wdat)
            for i in range(kh):
                for j in range(kw):
                    for ci in range(Ci):
                        patch = padded[:, ci, i:i + OH * s:s, j:j + OW * s:s]
                        gw[:, ci, i, j] = np.einsum("bohw,bhw->o", g, patch)
            spec.weight.accumulate_grad(gw)
        if spec.bias.requires_grad:
            spec.bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return Tensor.from_op(out, (x, spec.weight, spec.bias), bw)


def _corner_gather(data, b, c, yi, xi):
    """Value planes at integer grid coords with zero padding outside."""
    _, _, H, W = data.shape
    valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
    yc = np.clip(yi, 0, H - 1)
    xc = np.clip(xi, 0, W - 1)
    return data[b, c, yc, xc] * valid, valid, yc, xc


def gather_bilinear(x, b, c, y, x_coord):
    """Bilinearly sample `x[b, c]` at fractional (y, x) arrays, zero padded.

    All of b, c, y, x_coord are broadcast-compatible numpy arrays. Returns
    (values, backward) where backward(g) yields (grad_into_input, gy, gx);
    grad_into_input is accumulated into a caller-provided array via np.add.at.
    """
    y = np.asarray(y, dtype=np.float64)
    xq = np.asarray(x_coord, dtype=np.float64)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(xq).astype(np.intp)
    fy, fx = y - y0, xq - x0

    corners = []
    for dy, dx, wy, wx in (
        (0, 0, 1.0 - fy, 1.0 - fx),
        (0, 1, 1.0 - fy, fx),
        (1, 0, fy, 1.0 - fx),
        (1, 1, fy, fx),
    ):
        v, valid, yc, xc = _corner_gather(x, b, c, y0 + dy, x0 + dx)
        corners.append((v, valid, yc, xc, wy, wx, dy, dx))
    val = sum(v * wy * wx for v, _, _, _, wy, wx, _, _ in corners)

    def backward(g, gx_accum=None):
        """g: upstream grad, same shape as val. Returns (gy, gx) coordinate grads."""
        gy, gxc = 0.0, 0.0
        for v, valid, yc, xc, wy, wx, dy, dx in corners:
            if gx_accum is not None:
                np.add.at(gx_accum, (b, c, yc, xc), g * wy * wx * valid)
            sy = 1.0 if dy == 1 else -1.0
            sx = 1.0 if dx == 1 else -1.0
            gy = gy + g * v * sy * wx
            gxc = gxc + g * v * sx * wy
        return np.asarray(gy), np.asarray(gxc)

    return val, backward


def bilinear_sample(x, y, x_coord, b=0, c=0):
    """Sample one value from a (B, C, H, W) tensor at fractional (y, x).

    Zero padding outside the spatial bounds; differentiable in the input
    values and, when y / x_coord are Tensors, in the coordinates too.
    """
    yt = y if isinstance(y, Tensor) else Tensor(y)
    xt = x_coord if isinstance(x_coord, Tensor) else Tensor(x_coord)
    val, backward = gather_bilinear(
        x.data, np.asarray(b), np.asarray(c), yt.data, xt.data
    )

    def bw(g):
        g = np.asarray(g)
        gx_accum = np.zeros_like(x.data) if x.requires_grad else None
        gy, gxc = backward(g, gx_accum)
        if x.requires_grad:
            x.accumulate_grad(gx_accum)
        if yt.requires_grad:
            yt.accumulate_grad(gy)
        if xt.requires_grad:
            xt.accumulate_grad(gxc)

    return Tensor.from_op(val, (x, yt, xt), bw)


def softmax_lastdim(x):
    """Row-stabilized softmax over the last dimension."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        g = np.asarray(g)
        dot = (g * out).sum(axis=-1, keepdims=True)
        x.accumulate_grad(out * (g - dot))

    return Tensor.from_op(out, (x,), bw)


def _bin_edges(n_in, n_bins):
    starts = [(p * n_in) // n_bins for p in range(n_bins)]
    ends = [((p + 1) * n_in) // n_bins for p in range(n_bins)]
    return list(zip(starts, ends))


def adaptive_avg_pool(x, bins):
    """Average pool a (B, C, H, W) tensor onto an (nh, nw) grid.

    Bin p covers rows [floor(p*H/n), floor((p+1)*H/n)); empty bins yield 0.
    """
    nh, nw = bins
    B, C, H, W = x.shape
    rows = _bin_edges(H, nh)
    cols = _bin_edges(W, nw)
    out = np.zeros((B, C, nh, nw))
    for p, (r0, r1) in enumerate(rows):
        for q, (c0, c1) in enumerate(cols):
            if r1 > r0 and c1 > c0:
                out[:, :, p, q] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(g):
        g = np.asarray(g)
        gx = np.zeros_like(x.data)
        for p, (r0, r1) in enumerate(rows):
            for q, (c0, c1) in enumerate(cols):
                cnt = (r1 - r0) * (c1 - c0)
                if cnt > 0:
                    gx[:, :, r0:r1, c0:c1] += g[:, :, p, q, None, None] / cnt
        x.accumulate_grad(gx)

    return Tensor.from_op(out, (x,), bw)

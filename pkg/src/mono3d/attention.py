"""Asymmetric non-local attention with attention-weighted pyramid pooling.

The query branch stays at full resolution (N = H*W positions); the key and
value branches are pooled down to L pyramid descriptors by a weighted average
whose weights come from a learned sigmoid attention map. Similarity is then
an N x L (instead of N x N) matrix, giving O(N*L*C) cost.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ops import ConvSpec, conv2d, softmax_lastdim
from .tensor import Tensor

__all__ = [
    "PyramidSpec",
    "AnabParams",
    "attention_map",
    "pa2_pool",
    "anab_forward",
    "reference_nonlocal",
    "complexity_bench",
    "write_pgm",
]


def _level_bins(level):
    return tuple(level) if isinstance(level, (tuple, list)) else (int(level), int(level))


@dataclass
class PyramidSpec:
    """Pyramid levels for key/value pooling. An int level n means n x n bins;
    a (nh, nw) pair is allowed for non-square degenerate cases (e.g. one bin
    per pixel)."""

    levels: list = field(default_factory=lambda: [1, 4, 8, 16])
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        counts = [nh * nw for nh, nw in map(_level_bins, self.levels)]
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"pyramid levels must be strictly increasing, got {self.levels}")

    @property
    def descriptor_count(self):
        return sum(nh * nw for nh, nw in map(_level_bins, self.levels))


@dataclass
class AnabParams:
    """1x1 projections (query/key/value/output), attention conv, and pyramid."""

    query: ConvSpec
    key: ConvSpec
    value: ConvSpec
    out: ConvSpec
    attention: ConvSpec
    pyramid: PyramidSpec = field(default_factory=PyramidSpec)
    residual: bool = True

    @staticmethod
    def init_random(channels, pyramid=None, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        mk = lambda co: ConvSpec.init_random(channels, co, kernel=(1, 1), rng=rng)
        return AnabParams(
            query=mk(channels), key=mk(channels), value=mk(channels),
            out=mk(channels), attention=mk(1),
            pyramid=pyramid or PyramidSpec(),
        )

    def params(self):
        specs = (self.query, self.key, self.value, self.out, self.attention)
        return [p for s in specs for p in s.params()]


def attention_map(x, conv1x1):
    """Sigmoid-squashed spatial weight map, (B, 1, H, W) with entries in (0, 1)."""
    if conv1x1.out_channels != 1:
        raise ValueError("attention conv must have a single output channel")
    return conv2d(x, conv1x1).sigmoid()


def _bin_ranges(n_in, n_bins):
    return [((p * n_in) // n_bins, ((p + 1) * n_in) // n_bins) for p in range(n_bins)]


def pa2_pool(features, attn, spec):
    """Attention-weighted pyramid pooling of a (C, H, W) map to (L, C) rows.

    Each bin's descriptor is sum(a*f)/(sum(a) + eps) over the bin; levels are
    concatenated in ascending order, bins row-major within a level.
    """
    C, H, W = features.shape
    if attn.shape[-2:] != (H, W):
        raise ValueError(f"attention map {attn.shape} does not match features {features.shape}")
    a = attn.data.reshape(H, W)
    f = features.data
    eps = spec.epsilon

    rows, meta = [], []
    for level in spec.levels:
        nh, nw = _level_bins(level)
        for r0, r1 in _bin_ranges(H, nh):
            for c0, c1 in _bin_ranges(W, nw):
                den = a[r0:r1, c0:c1].sum() + eps
                num = (f[:, r0:r1, c0:c1] * a[r0:r1, c0:c1]).sum(axis=(1, 2))
                rows.append(num / den)
                meta.append((r0, r1, c0, c1, den))
    out = np.stack(rows, axis=0)

    def bw(g):
        g = np.asarray(g)
        gf = np.zeros_like(f) if features.requires_grad else None
        ga = np.zeros((H, W)) if attn.requires_grad else None
        for l, (r0, r1, c0, c1, den) in enumerate(meta):
            if gf is not None:
                gf[:, r0:r1, c0:c1] += g[l][:, None, None] * a[r0:r1, c0:c1] / den
            if ga is not None:
                # d desc_c / d a(p) = (f_c(p) - desc_c) / den
                ga[r0:r1, c0:c1] += np.einsum(
                    "c,chw->hw", g[l], f[:, r0:r1, c0:c1] - out[l][:, None, None]
                ) / den
        if gf is not None:
            features.accumulate_grad(gf)
        if ga is not None:
            attn.accumulate_grad(ga.reshape(attn.shape))

    return Tensor.from_op(out, (features, attn), bw)


def anab_forward(x, params):
    """Full attention block on a (B, C, H, W) tensor.

    Query at full resolution; key and value pooled with a single shared
    attention map; two matmuls; output 1x1 projection plus residual.
    """
    B, C, H, W = x.shape
    if C != params.query.in_channels:
        raise ValueError(f"input has {C} channels, params expect {params.query.in_channels}")
    N = H * W
    attn = attention_map(x, params.attention)
    q = conv2d(x, params.query)
    k = conv2d(x, params.key)
    v = conv2d(x, params.value)

    outs = []
    for b in range(B):
        m_q = q[b].reshape(C, N).T                       # N x C
        m_k = pa2_pool(k[b], attn[b], params.pyramid)    # L x C
        m_v = pa2_pool(v[b], attn[b], params.pyramid)    # L x C
        m_s = m_q @ m_k.T                                # N x L
        m_out = softmax_lastdim(m_s) @ m_v               # N x C
        outs.append(m_out.T.reshape(1, C, H, W))
    y = outs[0] if B == 1 else Tensor.concat(outs, axis=0)
    y = conv2d(y, params.out)
    return y + x if params.residual else y


def reference_nonlocal(x, residual=True):
    """Standard non-local block with identity embeddings: the O(N^2 C) oracle.

    y = softmax(M M^T) M (+ x), with M the (N, C) reshaped feature map.
    """
    B, C, H, W = x.shape
    N = H * W
    outs = []
    for b in range(B):
        m = x[b].reshape(C, N).T
        s = m @ m.T
        o = softmax_lastdim(s) @ m
        outs.append(o.T.reshape(1, C, H, W))
    y = outs[0] if B == 1 else Tensor.concat(outs, axis=0)
    return y + x if residual else y


# -- forward-only numpy paths for timing --------------------------------------


def _anab_forward_fast(x, spec):
    """Tape-free forward used only by the benchmark; weights folded to identity."""
    C, H, W = x.shape
    a = 1.0 / (1.0 + np.exp(-x.mean(axis=0)))  # stand-in attention map
    m_q = x.reshape(C, -1).T
    rows = []
    for level in spec.levels:
        nh, nw = _level_bins(level)
        for r0, r1 in _bin_ranges(H, nh):
            for c0, c1 in _bin_ranges(W, nw):
                den = a[r0:r1, c0:c1].sum() + spec.epsilon
                rows.append((x[:, r0:r1, c0:c1] * a[r0:r1, c0:c1]).sum(axis=(1, 2)) / den)
    m_k = np.stack(rows, axis=0)
    s = m_q @ m_k.T
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    return (p @ m_k).T.reshape(C, H, W)


def _nonlocal_forward_fast(x):
    C, H, W = x.shape
    m = x.reshape(C, -1).T
    s = m @ m.T
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    return (p @ m).T.reshape(C, H, W)


def complexity_bench(H, W, C, spec=None, repeats=3, nonlocal_hw=None, seed=0):
    """Wall-clock one forward of each block at the given size.

    Returns a dict with anab_time / nonlocal_time (best of `repeats`), the
    descriptor count L and pixel count N. `nonlocal_hw` lets the quadratic
    reference run at a smaller size when N would not fit comfortably.
    """
    spec = spec or PyramidSpec()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(C, H, W))
    nh, nw = nonlocal_hw or (H, W)
    xn = rng.normal(size=(C, nh, nw))

    def best_of(fn, arg):
        t0 = time.perf_counter()
        fn(arg)  # warm up, and gauge a single call
        single = max(time.perf_counter() - t0, 1e-6)
        # batch sub-millisecond ops so each sample spans ~25 ms of work
        loops = max(1, int(0.025 / single))
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for _ in range(loops):
                fn(arg)
            times.append((time.perf_counter() - t0) / loops)
        return min(times)

    def run():
        return {
            "anab_time": best_of(lambda t: _anab_forward_fast(t, spec), x),
            "nonlocal_time": best_of(_nonlocal_forward_fast, xn),
            "L": spec.descriptor_count,
            "N": H * W,
            "nonlocal_N": nh * nw,
        }

    try:  # single-threaded BLAS for stable, size-proportional timings
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1):
            return run()
    except ImportError:
        return run()


def write_pgm(gray, path):
    """Min-max normalized 8-bit binary PGM (P5)."""
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D map, got shape {g.shape}")
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo)
    pix = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode())
        f.write(pix.tobytes())

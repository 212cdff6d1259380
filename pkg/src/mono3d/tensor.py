"""Dense f64 tensor with reverse-mode autodiff.

Everything is float64 and single-threaded by design: the point of this core
is that gradients can be checked against finite differences, not throughput.
The tape is a plain list of (parent, closure) edges per node; backward() does
a topological sort and replays it. No graph rewriting, no fusion.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["Tensor", "save_tensor", "load_tensor", "dump_text"]

_MAGIC = b"M3TN"


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    # leading axes added by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Numpy-backed value with a gradient plane and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def from_op(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(np.asarray(g, dtype=np.float64), self.data.shape)

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad=None):
        """Reverse-mode sweep from this node. `grad` defaults to ones."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(node):
            stack = [(node, iter(node._parents))]
            seen.add(id(node))
            while stack:
                cur, it = stack[-1]
                advanced = False
                for p in it:
                    if id(p) not in seen and p.requires_grad:
                        seen.add(id(p))
                        stack.append((p, iter(p._parents)))
                        advanced = True
                        break
                if not advanced:
                    topo.append(cur)
                    stack.pop()

        visit(self)
        self.accumulate_grad(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ----------------------------------------------

    def _coerce(self, other):
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self.accumulate_grad(g)
            if other.requires_grad:
                other.accumulate_grad(g)

        return Tensor.from_op(out_data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self.accumulate_grad(g * other.data)
            if other.requires_grad:
                other.accumulate_grad(g * self.data)

        return Tensor.from_op(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = self.data / other.data

        def bw(g):
            if self.requires_grad:
                self.accumulate_grad(g / other.data)
            if other.requires_grad:
                other.accumulate_grad(-g * self.data / other.data ** 2)

        return Tensor.from_op(out_data, (self, other), bw)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p):
        assert isinstance(p, (int, float))
        out_data = self.data ** p

        def bw(g):
            self.accumulate_grad(g * p * self.data ** (p - 1))

        return Tensor.from_op(out_data, (self,), bw)

    # -- elementwise functions -----------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            self.accumulate_grad(g * out_data)

        return Tensor.from_op(out_data, (self,), bw)

    def log(self):
        out_data = np.log(self.data)

        def bw(g):
            self.accumulate_grad(g / self.data)

        return Tensor.from_op(out_data, (self,), bw)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bw(g):
            self.accumulate_grad(g * out_data * (1.0 - out_data))

        return Tensor.from_op(out_data, (self,), bw)

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def bw(g):
            self.accumulate_grad(g * (self.data > 0.0))

        return Tensor.from_op(out_data, (self,), bw)

    def maximum(self, other):
        """Elementwise max; at ties the gradient goes to `self` (subgradient)."""
        other = self._coerce(other)
        take_self = self.data >= other.data
        out_data = np.where(take_self, self.data, other.data)

        def bw(g):
            if self.requires_grad:
                self.accumulate_grad(g * take_self)
            if other.requires_grad:
                other.accumulate_grad(g * ~take_self)

        return Tensor.from_op(out_data, (self, other), bw)

    def minimum(self, other):
        other = self._coerce(other)
        take_self = self.data <= other.data
        out_data = np.where(take_self, self.data, other.data)

        def bw(g):
            if self.requires_grad:
                self.accumulate_grad(g * take_self)
            if other.requires_grad:
                other.accumulate_grad(g * ~take_self)

        return Tensor.from_op(out_data, (self, other), bw)

    def abs(self):
        sign = np.where(self.data >= 0.0, 1.0, -1.0)
        out_data = np.abs(self.data)

        def bw(g):
            self.accumulate_grad(g * sign)

        return Tensor.from_op(out_data, (self,), bw)

    # -- reductions / shaping -------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accumulate_grad(np.broadcast_to(g, self.data.shape))

        return Tensor.from_op(out_data, (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bw(g):
            self.accumulate_grad(np.asarray(g).reshape(self.data.shape))

        return Tensor.from_op(out_data, (self,), bw)

    def transpose(self, *axes):
        axes = axes or None
        out_data = self.data.transpose(axes) if axes else self.data.T
        inv = np.argsort(axes) if axes else None

        def bw(g):
            g = np.asarray(g)
            self.accumulate_grad(g.transpose(inv) if inv is not None else g.T)

        return Tensor.from_op(out_data, (self,), bw)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self.accumulate_grad(full)

        return Tensor.from_op(out_data, (self,), bw)

    @staticmethod
    def concat(tensors, axis=0):
        datas = [t.data for t in tensors]
        out_data = np.concatenate(datas, axis=axis)
        offsets = np.cumsum([0] + [d.shape[axis] for d in datas])

        def bw(g):
            g = np.asarray(g)
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t.accumulate_grad(g[tuple(sl)])

        return Tensor.from_op(out_data, tuple(tensors), bw)

    # -- linear algebra -------------------------------------------------------

    def matmul(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ValueError(
                f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
            )
        out_data = a @ b

        def bw(g):
            g = np.asarray(g)
            if self.requires_grad:
                self.accumulate_grad(g @ b.T)
            if other.requires_grad:
                other.accumulate_grad(a.T @ g)

        return Tensor.from_op(out_data, (self, other), bw)

    __matmul__ = matmul

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, grad={'yes' if self.grad is not None else 'no'})"


# -- serialization ------------------------------------------------------------


def save_tensor(t, path):
    """Binary dump: magic "M3TN", 4 little-endian u32 for the 4-D shape, f64 payload."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if data.ndim != 4:
        raise ValueError(f"serialization is defined for 4-D tensors, got ndim={data.ndim}")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<4I", *data.shape))
        f.write(data.astype("<f8").tobytes(order="C"))


def load_tensor(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        shape = struct.unpack("<4I", f.read(16))
        payload = np.frombuffer(f.read(), dtype="<f8")
    if payload.size != int(np.prod(shape)):
        raise ValueError(f"payload size {payload.size} does not match shape {shape}")
    return Tensor(payload.reshape(shape).astype(np.float64))


def dump_text(t, path):
    """Plain-text debug dump: shape header then one row of values per (b, c, h)."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    with open(path, "w") as f:
        f.write("shape " + " ".join(str(s) for s in data.shape) + "\n")
        flat = data.reshape(-1, data.shape[-1]) if data.ndim > 1 else data.reshape(1, -1)
        for row in flat:
            f.write(" ".join(format(v, ".17g") for v in row) + "\n")

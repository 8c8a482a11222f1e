"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` and records the operations applied to
it on a tape. Calling :meth:`Tensor.backward` on a scalar result walks the tape
in reverse topological order and accumulates gradients into every tensor
created with ``requires_grad=True``. Only the operations needed by the
forecaster are implemented; all of them are broadcasting-aware and all math is
done in float64.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block. Results become constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: "Tensor", g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tensor:
    """Array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # ------------------------------------------------------------------ basics

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------- tape

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all reachable leaves."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -------------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def bw(g, a=self, b=other):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))

        return _node(out_data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g, a=self):
            if a.requires_grad:
                _accum(a, -g)

        return _node(-self.data, (self,), bw)

    def __sub__(self, other):
        other = as_tensor(other)
        out_data = self.data - other.data

        def bw(g, a=self, b=other):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.data.shape))

        return _node(out_data, (self, other), bw)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data

        def bw(g, a=self, b=other):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return _node(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data

        def bw(g, a=self, b=other):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return _node(out_data, (self, other), bw)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data**p

        def bw(g, a=self):
            if a.requires_grad:
                _accum(a, g * p * a.data ** (p - 1))

        return _node(out_data, (self,), bw)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dimensions")
        out_data = np.matmul(self.data, other.data)

        def bw(g, a=self, b=other):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accum(a, _unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accum(b, _unbroadcast(gb, b.data.shape))

        return _node(out_data, (self, other), bw)

    # ------------------------------------------------------------ shape moves

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bw(g, a=self):
            if a.requires_grad:
                _accum(a, g.reshape(a.data.shape))

        return _node(out_data, (self,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def bw(g, a=self):
            if a.requires_grad:
                _accum(a, g.transpose(inv))

        return _node(out_data, (self,), bw)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def bw(g, a=self):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[idx] = g
                _accum(a, full)

        return _node(out_data, (self,), bw)

    def broadcast_to(self, shape):
        out_data = np.broadcast_to(self.data, shape).copy()

        def bw(g, a=self):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))

        return _node(out_data, (self,), bw)

    @staticmethod
    def concat(tensors: list["Tensor"], axis: int = 0) -> "Tensor":
        tensors = [as_tensor(t) for t in tensors]
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bw(g, parts=tuple(tensors)):
            for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    _accum(t, g[tuple(sl)])

        return _node(out_data, tuple(tensors), bw)

    # -------------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g, a=self):
            if a.requires_grad:
                gg = g
                if axis is not None and not keepdims:
                    gg = np.expand_dims(gg, axis)
                _accum(a, np.broadcast_to(gg, a.data.shape).copy())

        return _node(out_data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[i] for i in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # ------------------------------------------------------------- elementwise

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g, a=self, y=out_data):
            if a.requires_grad:
                _accum(a, g * y)

        return _node(out_data, (self,), bw)

    def log(self):
        out_data = np.log(self.data)

        def bw(g, a=self):
            if a.requires_grad:
                _accum(a, g / a.data)

        return _node(out_data, (self,), bw)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bw(g, a=self, y=out_data):
            if a.requires_grad:
                _accum(a, g * 0.5 / y)

        return _node(out_data, (self,), bw)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bw(g, a=self, y=out_data):
            if a.requires_grad:
                _accum(a, g * (1.0 - y * y))

        return _node(out_data, (self,), bw)

    def sigmoid(self):
        x = self.data
        z = np.exp(-np.abs(x))  # never overflows
        out_data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

        def bw(g, a=self, y=out_data):
            if a.requires_grad:
                _accum(a, g * y * (1.0 - y))

        return _node(out_data, (self,), bw)

    def sin(self):
        out_data = np.sin(self.data)

        def bw(g, a=self):
            if a.requires_grad:
                _accum(a, g * np.cos(a.data))

        return _node(out_data, (self,), bw)

    def cos(self):
        out_data = np.cos(self.data)

        def bw(g, a=self):
            if a.requires_grad:
                _accum(a, -g * np.sin(a.data))

        return _node(out_data, (self,), bw)

    def gelu(self):
        # tanh approximation; derivative matches the same approximation.
        k = np.sqrt(2.0 / np.pi)
        x = self.data
        inner = k * (x + 0.044715 * x**3)
        th = np.tanh(inner)
        out_data = 0.5 * x * (1.0 + th)

        def bw(g, a=self, th=th):
            xx = a.data
            if a.requires_grad:
                d_inner = k * (1.0 + 3 * 0.044715 * xx * xx)
                _accum(a, g * (0.5 * (1.0 + th) + 0.5 * xx * (1.0 - th * th) * d_inner))

        return _node(out_data, (self,), bw)

    def silu(self):
        return self * self.sigmoid()

    def softmax(self, axis: int = -1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def bw(g, a=self, y=out_data):
            if a.requires_grad:
                dot = (g * y).sum(axis=axis, keepdims=True)
                _accum(a, y * (g - dot))

        return _node(out_data, (self,), bw)

    def layernorm(self, eps: float = 1e-6):
        """Normalize the last axis to zero mean and unit variance (no affine)."""
        x = self.data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out_data = xhat

        def bw(g, a=self, xhat=xhat, inv=inv):
            if a.requires_grad:
                gm = g.mean(axis=-1, keepdims=True)
                gxm = (g * xhat).mean(axis=-1, keepdims=True)
                _accum(a, inv * (g - gm - xhat * gxm))

        return _node(out_data, (self,), bw)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Wrap an array as a trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None

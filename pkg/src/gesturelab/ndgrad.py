"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Everything downstream (networks, kinematics, losses) is built from the ops
in this module. Arrays are immutable by convention: ops never write into
their inputs, so values can be shared freely across threads. A Tape is
confined to a single thread and is consumed by one backward() call.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACOS_EPS = 1e-7


class AutodiffError(Exception):
    pass


class DomainError(AutodiffError):
    """A forward op left its numeric domain (log of negative, NaN, ...)."""


_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed ops; reverse traversal computes adjoints."""

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn)
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        assert _TAPE_STACK.pop() is self
        return False

    def _record(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: "Tensor"):
        """Accumulate d(root)/d(leaf) into .grad of every grad-requiring tensor."""
        if self._consumed:
            raise AutodiffError("backward called twice on one tape")
        if root.data.size != 1:
            raise AutodiffError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True
        adjoint = {id(root): np.ones_like(root.data)}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gi
                else:
                    adjoint[key] = gi
            if out.requires_grad and not out._is_leaf:
                # keep nothing: intermediate grads only flow through
                pass
        # what is left in adjoint belongs to leaves (or root itself)
        seen = set()
        for out, inputs, _ in self._nodes:
            for t in inputs:
                if t.requires_grad and t._is_leaf and id(t) not in seen:
                    seen.add(id(t))
                    g = adjoint.get(id(t))
                    t.grad = np.zeros_like(t.data) if g is None else g


class Tensor:
    """Immutable float64 array, optionally recorded on the active Tape."""

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make_op(out_data, inputs, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = astensor(a), astensor(b)
    return _make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = astensor(a), astensor(b)
    return _make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = astensor(a), astensor(b)
    return _make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = astensor(a), astensor(b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _make_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    a = astensor(a)
    return _make_op(-a.data, (a,), lambda g: (-g,))


def relu(a):
    a = astensor(a)
    mask = a.data > 0
    return _make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a):
    a = astensor(a)
    s = np.sign(a.data)
    return _make_op(np.abs(a.data), (a,), lambda g: (g * s,))


def exp(a):
    a = astensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflow")
    return _make_op(out, (a,), lambda g: (g * out,))


def log(a):
    a = astensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    return _make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = astensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    if np.any(out == 0.0):
        raise DomainError("sqrt at zero has unbounded gradient")
    return _make_op(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    a = astensor(a)
    return _make_op(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def acos(a):
    """acos with the argument clamped to [-1+eps, 1-eps] before differentiation."""
    a = astensor(a)
    c = np.clip(a.data, -1.0 + ACOS_EPS, 1.0 - ACOS_EPS)
    inside = np.abs(a.data) <= 1.0 - ACOS_EPS
    denom = np.sqrt(1.0 - c * c)
    return _make_op(np.arccos(c), (a,), lambda g: (np.where(inside, -g / denom, 0.0),))


def clamp(a, lo, hi):
    a = astensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, c):
    """Elementwise max with a scalar; gradient flows where a > c."""
    a = astensor(a)
    mask = a.data > c
    return _make_op(np.maximum(a.data, c), (a,), lambda g: (g * mask,))


def minimum(a, c):
    """Elementwise min with a scalar; gradient flows where a < c."""
    a = astensor(a)
    mask = a.data < c
    return _make_op(np.minimum(a.data, c), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape and reduction ops


def sum_(a, axis=None, keepdims=False):
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make_op(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = astensor(a)
    return _make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = astensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, key):
    a = astensor(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g  # basic indexing only: slices address disjoint elements
        return (full,)

    return _make_op(out, (a,), backward)


def concat(tensors, axis):
    tensors = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make_op(out, tuple(tensors), backward)


def stack(tensors, axis):
    expanded = []
    for t in tensors:
        t = astensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make_op(out, (a, b), backward)


# ---------------------------------------------------------------------------
# convolution


def conv1d(x, w, b):
    """Same-padded stride-1 1D convolution.

    x: [C_in, T] or [B, C_in, T]; w: [C_out, C_in, K] with K odd; b: [C_out].
    Output temporal length equals input length.
    """
    x, w, b = astensor(x), astensor(w), astensor(b)
    unbatched = x.ndim == 2
    if x.ndim not in (2, 3) or w.ndim != 3 or b.ndim != 1:
        raise ValueError("conv1d expects x [B,C,T] or [C,T], w [Co,Ci,K], b [Co]")
    co, ci, k = w.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel size must be odd, got {k}")
    if b.shape[0] != co:
        raise ValueError("bias length does not match output channels")
    xb = x.data[None] if unbatched else x.data
    bsz, c, t = xb.shape
    if c != ci:
        raise ValueError(f"conv1d channel mismatch: input {c}, weight {ci}")
    p = (k - 1) // 2
    xp = np.zeros((bsz, c, t + 2 * p))
    xp[:, :, p : p + t] = xb
    # [B, C, T, K] windows flattened into one GEMM
    win = sliding_window_view(xp, k, axis=2)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(bsz * t, c * k)
    out = cols @ w.data.reshape(co, c * k).T
    out = out.reshape(bsz, t, co).transpose(0, 2, 1) + b.data[None, :, None]
    if unbatched:
        out = out[0]

    def backward(g):
        gb3 = g[None] if unbatched else g
        gm = np.ascontiguousarray(gb3.transpose(0, 2, 1)).reshape(bsz * t, co)
        dw = (gm.T @ cols).reshape(co, ci, k)
        db = gb3.sum(axis=(0, 2))
        dcols = (gm @ w.data.reshape(co, c * k)).reshape(bsz, t, c, k)
        dxp = np.zeros_like(xp)
        for kk in range(k):
            dxp[:, :, kk : kk + t] += dcols[:, :, :, kk].transpose(0, 2, 1)
        dx = dxp[:, :, p : p + t]
        if unbatched:
            dx = dx[0]
        return (dx, dw, db)

    return _make_op(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# checks


def check_finite(t: Tensor, name="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise DomainError(f"non-finite values in {name}")
    return t


def grad_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor and must be smooth near x. Relative
    error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        out = f(xt)
        tape.backward(out)
    analytic = xt.grad.reshape(-1)
    numeric = np.zeros_like(analytic)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        pert = x.copy().reshape(-1)
        pert[i] = orig + h
        fp = float(f(Tensor(pert.reshape(x.shape))).data)
        pert[i] = orig - h
        fm = float(f(Tensor(pert.reshape(x.shape))).data)
        numeric[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())

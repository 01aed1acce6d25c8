"""Minimal reverse-mode autodiff over float64 numpy arrays.

The op set is exactly what the descriptor head and its losses need: dense
matmul, elementwise arithmetic with numpy broadcasting, numerically stable
softmax/softplus, ReLU, 1x1 and 3x3 same-padding convolution, L2
normalization, reductions, reshapes, and row gather/concat. Anything fancier
(strided views, general N-d contractions, GPU) is deliberately out of scope
so the whole surface stays small enough to audit against finite differences.

All arrays are float64. Ops never mutate their inputs; gradients accumulate
additively, so a tensor feeding several consumers gets the sum of their
contributions.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """A float64 ndarray plus an optional entry on the gradient tape.

    Tensors built directly from data are leaves. Ops return tensors wired to
    the inputs that require gradients; ``backward`` on a scalar output then
    fills ``grad`` on every reachable leaf with ``requires_grad=True``.
    Tensors outside the tape are never recorded, which keeps pure inference
    allocation-light.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar -------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        """Seed d(self)/d(self)=1 and push gradients to every tracked leaf."""
        if self.data.size != 1:
            raise DimensionError(
                f"backward() needs a scalar root, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order of the tape reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents) -> Tensor:
    """Build an op output, recording only parents that require grad."""
    tracked = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = bool(tracked)
    out._parents = tracked
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return _from_op(data, (
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    return _from_op(data, (
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return _from_op(data, (
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data
    return _from_op(data, (
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ))


def tsum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.full(t.data.shape, np.asarray(g).reshape(()))
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, t.data.shape).copy()

    return _from_op(np.asarray(data), ((t, vjp),))


def mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    n = t.data.size if axis is None else t.data.shape[axis]
    return mul(tsum(t, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    data = t.data.reshape(shape)
    return _from_op(data, ((t, lambda g: g.reshape(t.data.shape)),))


def transpose(t) -> Tensor:
    t = as_tensor(t)
    if t.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {t.data.shape}")
    return _from_op(t.data.T.copy(), ((t, lambda g: g.T.copy()),))


def take_rows(t, idx) -> Tensor:
    """Gather rows of a 2-d tensor; duplicate indices accumulate in backward."""
    t = as_tensor(t)
    if t.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-d tensor, got {t.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    data = t.data[idx]

    def vjp(g):
        out = np.zeros_like(t.data)
        np.add.at(out, idx, g)
        return out

    return _from_op(data, ((t, vjp),))


def concat_rows(tensors) -> Tensor:
    """Stack 2-d tensors along axis 0."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat_rows needs at least one tensor")
    for t in tensors:
        if t.ndim != 2 or t.data.shape[1] != tensors[0].data.shape[1]:
            raise DimensionError("concat_rows operands must be 2-d with equal width")
    data = np.concatenate([t.data for t in tensors], axis=0)
    parents = []
    offset = 0
    for t in tensors:
        n = t.data.shape[0]
        start = offset

        def vjp(g, start=start, n=n):
            return g[start:start + n]

        parents.append((t, vjp))
        offset += n
    return _from_op(data, tuple(parents))


# -- nonlinearities ------------------------------------------------------


def relu(t) -> Tensor:
    t = as_tensor(t)
    data = np.maximum(t.data, 0.0)
    return _from_op(data, ((t, lambda g: g * (t.data > 0.0)),))


def exp(t) -> Tensor:
    t = as_tensor(t)
    data = np.exp(t.data)
    return _from_op(data, ((t, lambda g: g * data),))


def softplus(t) -> Tensor:
    """log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|) so it never overflows."""
    t = as_tensor(t)
    x = t.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _from_op(data, ((t, lambda g: g * sig),))


def softmax(t) -> Tensor:
    """Softmax along the last axis, with the row max subtracted first."""
    t = as_tensor(t)
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return data * (g - dot)

    return _from_op(data, ((t, vjp),))


def l2_normalize(t, axis: int, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm; zero slices stay zero."""
    t = as_tensor(t)
    norm = np.sqrt((t.data * t.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    data = t.data / safe

    def vjp(g):
        proj = (g * data).sum(axis=axis, keepdims=True)
        return (g - data * proj) / safe

    return _from_op(data, ((t, vjp),))


# -- convolutions --------------------------------------------------------


def conv2d_1x1(fm, w, b) -> Tensor:
    """Pointwise conv on an HxWxDin map: per-pixel matmul plus bias."""
    fm, w, b = as_tensor(fm), as_tensor(w), as_tensor(b)
    if fm.ndim != 3:
        raise DimensionError(f"conv2d_1x1 expects an HxWxD map, got {fm.data.shape}")
    h, wd, din = fm.data.shape
    if w.ndim != 2 or w.data.shape[0] != din:
        raise DimensionError(
            f"conv2d_1x1 kernel must be ({din}, Dout), got {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise DimensionError(f"conv2d_1x1 bias must be (Dout,), got {b.data.shape}")
    flat = reshape(fm, (h * wd, din))
    out = add(matmul(flat, w), b)
    return reshape(out, (h, wd, w.data.shape[1]))


def conv2d_3x3(fm, w, b) -> Tensor:
    """3x3 same-padding conv on an HxWxDin map; kernel is (3, 3, Din, Dout)."""
    fm, w, b = as_tensor(fm), as_tensor(w), as_tensor(b)
    if fm.ndim != 3:
        raise DimensionError(f"conv2d_3x3 expects an HxWxD map, got {fm.data.shape}")
    h, wd, din = fm.data.shape
    if w.data.shape != (3, 3, din, w.data.shape[-1]):
        raise DimensionError(
            f"conv2d_3x3 kernel must be (3, 3, {din}, Dout), got {w.data.shape}"
        )
    dout = w.data.shape[-1]
    if b.data.shape != (dout,):
        raise DimensionError(f"conv2d_3x3 bias must be (Dout,), got {b.data.shape}")

    padded = np.zeros((h + 2, wd + 2, din))
    padded[1:h + 1, 1:wd + 1] = fm.data
    out = np.broadcast_to(b.data, (h, wd, dout)).copy()
    for u in range(3):
        for v in range(3):
            patch = padded[u:u + h, v:v + wd].reshape(h * wd, din)
            out += (patch @ w.data[u, v]).reshape(h, wd, dout)

    def vjp_fm(g):
        gpad = np.zeros_like(padded)
        gflat = g.reshape(h * wd, dout)
        for u in range(3):
            for v in range(3):
                gpad[u:u + h, v:v + wd] += (gflat @ w.data[u, v].T).reshape(h, wd, din)
        return gpad[1:h + 1, 1:wd + 1]

    def vjp_w(g):
        gw = np.zeros_like(w.data)
        gflat = g.reshape(h * wd, dout)
        for u in range(3):
            for v in range(3):
                patch = padded[u:u + h, v:v + wd].reshape(h * wd, din)
                gw[u, v] = patch.T @ gflat
        return gw

    return _from_op(out, (
        (fm, vjp_fm),
        (w, vjp_w),
        (b, lambda g: g.sum(axis=(0, 1))),
    ))


def sq_distance(a, b) -> Tensor:
    """Squared Euclidean distance between two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"sq_distance operands differ in shape: {a.data.shape} vs {b.data.shape}"
        )
    d = sub(a, b)
    return tsum(mul(d, d))

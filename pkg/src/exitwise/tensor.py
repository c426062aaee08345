"""Dense tensors with reverse-mode automatic differentiation.

numpy supplies the array arithmetic; the graph bookkeeping (parents plus a
backward rule per node) is recorded here during the forward pass and replayed
in reverse topological order by :func:`backward`. The graph is rebuilt on
every forward pass (define-by-run) and freed with the tensors that hold it.

float32 is the working precision; building a model or inputs in float64
turns the same code into a tight oracle for finite-difference checks.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, EmptySequenceError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """n-dimensional float array with an optional slot on the autodiff tape.

    ``grad``, once populated, always has the same shape as ``data``.
    Gradients accumulate additively across fan-out, so reusing a tensor in
    two places sums both contributions.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._rule = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------

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
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple, rule) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._rule = rule
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, extent in enumerate(shape):
        if extent == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ops -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)

    def rule(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)

    def rule(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)

    def rule(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    def rule(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), rule)


def power(a: Tensor, exponent: float) -> Tensor:
    c = float(exponent)
    out_data = a.data ** c

    def rule(g):
        a._accumulate(g * c * a.data ** (c - 1.0))

    return _node(out_data, (a,), rule)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def rule(g):
        a._accumulate(g * out_data)

    return _node(out_data, (a,), rule)


def log(a: Tensor) -> Tensor:
    def rule(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), rule)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def rule(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), rule)


def sigmoid(a: Tensor) -> Tensor:
    # 1 / (1 + e^-x), computed branch-free; stable for large |x| in f32.
    out_data = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def rule(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), rule)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def rule(g):
        a._accumulate(g * mask)

    return _node(a.data * mask, (a,), rule)


def absolute(a: Tensor) -> Tensor:
    def rule(g):
        a._accumulate(g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), rule)


# -- reductions ------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True))

    return _node(out_data, (a,), rule)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = 1
        for ax in axis:
            count *= a.shape[ax]
    else:
        count = a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    def rule(g):
        a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), rule)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        a._accumulate(g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), rule)


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def getitem(a: Tensor, key) -> Tensor:
    basic = _is_basic_index(key)

    def rule(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] += g  # basic slices never alias, += is safe
        else:
            np.add.at(full, key, g)
        a._accumulate(full)

    return _node(a.data[key].copy(), (a,), rule)


def stack(tensors, axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("stack needs at least one tensor")

    def rule(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(part)

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, rule)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def rule(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(np.matmul(a.data, b.data), (a, b), rule)


# -- neural-net primitives ---------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Probabilities along ``axis``; max-subtraction keeps every finite input valid."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _node(out_data, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g):
        a._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (a,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply the affine pair."""
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv_std = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv_std), gain), bias)


def mean_pool(x: Tensor) -> Tensor:
    """Collapse the time axis of a (batch, time, features) tensor by arithmetic mean."""
    if x.ndim != 3:
        raise ShapeError(f"mean_pool expects (batch, time, features), got {x.shape}")
    if x.shape[1] == 0:
        raise EmptySequenceError("mean_pool over an empty time axis")
    return tmean(x, axis=1)


def unfold_time(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Extract sliding windows along axis 1: (B, S, C) -> (B, F, K, C).

    F = (S - kernel) // stride + 1; trailing samples that do not fill a
    window are dropped and receive zero gradient.
    """
    b, s, c = x.shape
    if s < kernel:
        raise ShapeError(f"sequence length {s} shorter than kernel {kernel}")
    f = (s - kernel) // stride + 1
    sb, ss, sc = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data, shape=(b, f, kernel, c), strides=(sb, ss * stride, ss, sc)
    ).copy()

    def rule(g):
        full = np.zeros_like(x.data)
        for k in range(kernel):
            full[:, k : k + stride * f : stride, :] += g[:, :, k, :]
        x._accumulate(full)

    return _node(windows, (x,), rule)


def cosine_rows(u: Tensor, v: Tensor, warn_degenerate: bool = True) -> Tensor:
    """Row-wise cosine similarity of two (B, D) tensors.

    Rows where either vector has zero norm contribute 0 (and emit a
    RuntimeWarning once per call); their gradient is zero as well.
    """
    if u.shape != v.shape or u.ndim != 2:
        raise ShapeError(f"cosine_rows expects matching (B, D) tensors, got {u.shape} vs {v.shape}")
    nu = np.sqrt((u.data * u.data).sum(axis=1))
    nv = np.sqrt((v.data * v.data).sum(axis=1))
    mask = (nu > 0) & (nv > 0)
    if warn_degenerate and not mask.all():
        import warnings

        warnings.warn("zero-norm vector in cosine similarity; pair contributes 0", RuntimeWarning)
    denom = np.where(mask, nu * nv, 1.0)
    dots = (u.data * v.data).sum(axis=1)
    cos = np.where(mask, dots / denom, 0.0).astype(u.dtype)

    def rule(g):
        gm = g * mask
        if u.requires_grad:
            gu = gm[:, None] * (v.data / denom[:, None] - (cos / np.where(mask, nu * nu, 1.0))[:, None] * u.data)
            u._accumulate(gu.astype(u.dtype))
        if v.requires_grad:
            gv = gm[:, None] * (u.data / denom[:, None] - (cos / np.where(mask, nv * nv, 1.0))[:, None] * v.data)
            v._accumulate(gv.astype(v.dtype))

    return _node(cos, (u, v), rule)


# -- backward pass -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The recorded operations are replayed once in reverse topological order,
    so fan-out accumulates additively and no rule runs twice.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._rule is not None and node.grad is not None:
            node._rule(node.grad)

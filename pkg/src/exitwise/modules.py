"""Neural-network building blocks on top of the tensor core.

A Module owns named parameters and child modules; ``parameters()`` flattens
them into an ordered name -> Tensor mapping, and that naming is what the
checkpoint container and the optimizer key on.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", False)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, child in enumerate(value):
                self._children[f"{name}.{i}"] = child
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_child(self, name: str, module: "Module") -> None:
        """Attach a child under an explicit name (for checkpoint-facing naming)."""
        self._children[name] = module

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            out.update(child.parameters(prefix + name + "."))
        return out

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, arr in values.items():
            if name not in params:
                raise ShapeError(f"no parameter named {name!r}")
            p = params[name]
            if tuple(arr.shape) != p.shape:
                raise ShapeError(f"parameter {name!r}: expected shape {p.shape}, got {tuple(arr.shape)}")
            p.data = np.asarray(arr, dtype=p.dtype).copy()

    def zero_grads(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; composed from primitives so gradients come for free
    c = math.sqrt(2.0 / math.pi)
    inner = T.tanh((x + x * x * x * 0.044715) * c)
    return x * (inner + 1.0) * 0.5


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32, zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, n_in**-0.5, size=(n_in, n_out))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        object.__setattr__(self, "eps", eps)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Dropout(Module):
    """Inverted dropout; inactive when p == 0 or the module is in eval mode."""

    def __init__(self, p: float):
        super().__init__()
        object.__setattr__(self, "p", float(p))

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if not self.training or self.p <= 0.0 or rng is None:
            return x
        keep = (rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        return x * Tensor(keep)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"hidden dim {dim} not divisible by {heads} heads")
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "head_dim", dim // heads)
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        b, f, r = x.shape
        h, d = self.heads, self.head_dim

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, f, h, d).transpose(0, 2, 1, 3)  # (B, h, F, d)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (d**-0.5)
        attn = T.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, f, r)
        return self.wo(ctx)


class TransformerLayer(Module):
    """Post-norm encoder layer: attention, residual, norm, feed-forward, residual, norm."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator, dtype=np.float32, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.ff1 = Linear(dim, ff_dim, rng, dtype)
        self.ff2 = Linear(ff_dim, dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.drop = Dropout(dropout)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        x = self.norm1(x + self.drop(self.attn(x), rng))
        return self.norm2(x + self.drop(self.ff2(gelu(self.ff1(x))), rng))


class Conv1d(Module):
    """Strided 1-D convolution over the time axis of (B, S, C_in)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "stride", stride)
        w = rng.normal(0.0, (kernel * c_in) ** -0.5, size=(kernel * c_in, c_out))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def out_length(self, s: int) -> int:
        return (s - self.kernel) // self.stride + 1

    def __call__(self, x: Tensor) -> Tensor:
        b, s, c = x.shape
        f = self.out_length(s)
        windows = T.unfold_time(x, self.kernel, self.stride).reshape(b, f, self.kernel * c)
        return windows @ self.weight + self.bias


class Head(Module):
    """Two-linear-layer classifier: pooled features -> hidden activation -> logits.

    The final projection starts at zero so an untrained head emits uniform
    class probabilities and fine-tunes quickly at small learning rates.
    """

    def __init__(self, n_in: int, d1: int, d2: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.l1 = Linear(n_in, d1, rng, dtype)
        self.l2 = Linear(d1, d2, rng, dtype, zero_init=True)

    def __call__(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        hidden = T.relu(self.l1(pooled))
        return self.l2(hidden), hidden


_PE_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def sinusoidal_encoding(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    key = (length, dim, np.dtype(dtype).name)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None].astype(np.float64)
        i = np.arange(0, dim, 2).astype(np.float64)
        angles = pos / np.power(10000.0, i / dim)
        pe = np.zeros((length, dim))
        pe[:, 0::2] = np.sin(angles)
        pe[:, 1::2] = np.cos(angles[:, : pe[:, 1::2].shape[1]])
        _PE_CACHE[key] = pe.astype(dtype)
    return _PE_CACHE[key]

"""Finite-difference gradient checking used across the test suite.

Everything runs in float64: central differences with h=1e-4 then agree with
the analytic gradients to a relative 1e-4 comfortably.
"""

from __future__ import annotations

import numpy as np

from exitwise.tensor import Tensor, backward

H = 1e-4
RTOL = 1e-4
ATOL = 1e-6


def leaf(rng: np.random.Generator, *shape, scale: float = 1.0, offset: float = 0.0) -> Tensor:
    data = (rng.normal(0.0, scale, size=shape) + offset).astype(np.float64)
    return Tensor(data, requires_grad=True)


def numeric_grad(f, array: np.ndarray, h: float = H, indices=None) -> np.ndarray:
    """Central differences of scalar-valued ``f`` w.r.t. ``array`` in place."""
    g = np.zeros_like(array)
    flat = array.reshape(-1)
    gf = g.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def assert_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = RTOL, atol: float = ATOL,
                 indices=None, label: str = "") -> None:
    if indices is not None:
        analytic = analytic.reshape(-1)[list(indices)]
        numeric = numeric.reshape(-1)[list(indices)]
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol, err_msg=label)


def check_grads(fn, leaves: list[Tensor], rtol: float = RTOL, atol: float = ATOL, label: str = "") -> None:
    """``fn()`` rebuilds a scalar Tensor from ``leaves``; compare both gradients."""
    for t in leaves:
        t.grad = None
    out = fn()
    backward(out)
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: float(fn().data), t.data)
        assert_close(analytic, numeric, rtol, atol, label=label)


def check_op(op, leaves: list[Tensor], rng: np.random.Generator, label: str = "",
             rtol: float = RTOL, atol: float = ATOL) -> None:
    """Check ``op() -> Tensor`` through a random projection to a scalar.

    The projection is drawn once and frozen, so every finite-difference
    evaluation sees the same function while the whole Jacobian participates.
    """
    shape = op().shape
    w = Tensor(rng.normal(0.0, 1.0, size=shape).astype(np.float64))
    check_grads(lambda: (op() * w).sum(), leaves, rtol=rtol, atol=atol, label=label)

import numpy as np
import pytest

import exitwise.tensor as T
from exitwise.errors import ContractError, EmptySequenceError, ShapeError
from exitwise.tensor import Tensor, backward

from gradcheck import check_grads, check_op, leaf


def test_matmul_identity():
    a = Tensor(np.eye(2, dtype=np.float32))
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
    np.testing.assert_array_equal((a @ b).data, b.data)


def test_matmul_projector():
    p = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
    v = Tensor(np.array([[5.0], [7.0]]))
    np.testing.assert_array_equal((p @ v).data, [[5.0], [0.0]])


def test_matmul_against_triple_loop_oracle():
    rng = np.random.default_rng(42)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = (Tensor(a) @ Tensor(b)).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 2)))


def test_softmax_uniform_and_analytic():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3)), axis=0).data, [1 / 3] * 3, atol=1e-7)
    got = T.softmax(Tensor(np.array([0.0, np.log(2.0)])), axis=0).data
    np.testing.assert_allclose(got, [1 / 3, 2 / 3], atol=1e-7)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5)).astype(np.float32)
    a = T.softmax(Tensor(x), axis=1).data
    b = T.softmax(Tensor(x + 100.0), axis=1).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_softmax_simplex_property():
    rng = np.random.default_rng(1)
    for _ in range(25):
        x = rng.normal(0, 5, size=(3, 7)).astype(np.float32)
        p = T.softmax(Tensor(x), axis=1).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_layer_norm_constant_vector_is_zero():
    x = Tensor(np.full((1, 4), 3.5))
    out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-7)


def test_layer_norm_already_normalized():
    x = Tensor(np.array([[1.0, -1.0]]))
    out = T.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_moments():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(2.0, 3.0, size=(5, 16)))
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-3


def test_mean_pool_examples():
    v = np.array([[1.0, 3.0], [3.0, 1.0]])
    x = Tensor(v[None])  # (1, 2, 2)
    np.testing.assert_allclose(T.mean_pool(x).data, [[2.0, 2.0]])
    const = Tensor(np.tile(np.array([1.0, 2.0, 3.0]), (2, 5, 1)))
    np.testing.assert_allclose(T.mean_pool(const).data, [[1, 2, 3], [1, 2, 3]])


def test_mean_pool_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 4)).astype(np.float32)
    want = np.zeros((2, 4), dtype=np.float32)
    for b in range(2):
        for r in range(4):
            want[b, r] = sum(x[b, f, r] for f in range(5)) / 5
    np.testing.assert_allclose(T.mean_pool(Tensor(x)).data, want, atol=1e-6)


def test_mean_pool_empty_time_axis():
    with pytest.raises(EmptySequenceError):
        T.mean_pool(Tensor(np.zeros((2, 0, 4))))


def test_backward_linear_and_quadratic():
    x = Tensor(np.ones(3, dtype=np.float64), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward((x * x * 0.5).sum())
    np.testing.assert_allclose(x.grad, [1.0, 2.0, 3.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_fanout_accumulation_doubles_exactly():
    x = Tensor(np.array([1.0, 2.0], dtype=np.float64), requires_grad=True)
    backward((x * 3.0).sum())
    once = x.grad.copy()
    x.grad = None
    y = x * 3.0
    backward(y.sum() + y.sum())
    np.testing.assert_array_equal(x.grad, 2.0 * once)


def test_unreachable_leaf_has_no_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    backward(x.sum())
    assert y.grad is None


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(8, 8)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.normal(size=(8, 8)).astype(np.float32), requires_grad=True)
        out = T.softmax(a @ b, axis=1).sum()
        backward(out)
        return out.data.copy(), a.grad.copy()

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_cosine_rows_degenerate_warns_and_zeroes():
    u = Tensor(np.array([[1.0, 1.0], [1.0, 0.0]]), requires_grad=True)
    v = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]), requires_grad=True)
    with pytest.warns(RuntimeWarning):
        out = T.cosine_rows(u, v)
    np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-7)
    backward(out.sum())
    np.testing.assert_array_equal(u.grad[0], [0.0, 0.0])
    np.testing.assert_array_equal(v.grad[0], [0.0, 0.0])


def test_unfold_time_matches_manual_windows():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 9, 3))
    out = T.unfold_time(Tensor(x), kernel=4, stride=2).data
    assert out.shape == (2, 3, 4, 3)
    for f in range(3):
        np.testing.assert_array_equal(out[:, f], x[:, 2 * f : 2 * f + 4])


# -- gradient property suites (compact; the 100-case acceptance suite reuses these) --

UNARY_CASES = [
    ("exp", lambda t: T.exp(t), dict(scale=0.8)),
    ("log", lambda t: T.log(t), dict(scale=0.3, offset=2.0)),
    ("tanh", lambda t: T.tanh(t), dict(scale=1.5)),
    ("sigmoid", lambda t: T.sigmoid(t), dict(scale=1.5)),
    ("relu", lambda t: T.relu(t), dict(scale=1.0, offset=0.3)),
    ("abs", lambda t: T.absolute(t), dict(scale=1.0, offset=0.4)),
    ("pow2", lambda t: t ** 2.0, dict(scale=1.0)),
    ("softmax", lambda t: T.softmax(t, axis=-1), dict(scale=2.0)),
    ("log_softmax", lambda t: T.log_softmax(t, axis=-1), dict(scale=2.0)),
    ("sum0", lambda t: t.sum(axis=0), dict(scale=1.0)),
    ("mean1k", lambda t: t.mean(axis=1, keepdims=True), dict(scale=1.0)),
    ("reshape", lambda t: t.reshape(t.size), dict(scale=1.0)),
    ("transpose", lambda t: t.transpose(1, 0), dict(scale=1.0)),
    ("slice", lambda t: t[:, 1:3], dict(scale=1.0)),
]


@pytest.mark.parametrize("name,op,kws", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_unary_gradients(name, op, kws):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for case in range(10):
        x = leaf(rng, 3, 4, **kws)
        check_op(lambda: op(x), [x], rng, label=f"{name}[{case}]")


def test_binary_and_matmul_gradients():
    rng = np.random.default_rng(11)
    for _ in range(10):
        a = leaf(rng, 3, 4)
        b = leaf(rng, 3, 4)
        c = leaf(rng, 4)  # broadcasting partner
        check_op(lambda: a + b, [a, b], rng)
        check_op(lambda: a * b, [a, b], rng)
        check_op(lambda: a - c, [a, c], rng)
        m = leaf(rng, 4, 2)
        check_op(lambda: a @ m, [a, m], rng)
        batched = leaf(rng, 2, 3, 4)
        check_op(lambda: batched @ m, [batched, m], rng)
        other = leaf(rng, 2, 4, 5)
        check_op(lambda: batched @ other, [batched, other], rng)


def test_structured_op_gradients():
    rng = np.random.default_rng(13)
    for _ in range(5):
        x = leaf(rng, 2, 6, 3)
        check_op(lambda: T.unfold_time(x, 3, 2), [x], rng)
        pooled = leaf(rng, 2, 5, 4)
        check_op(lambda: T.mean_pool(pooled), [pooled], rng)
        g = leaf(rng, 4)
        bch = leaf(rng, 4)
        h = leaf(rng, 3, 4)
        check_op(lambda: T.layer_norm(h, g, bch), [h, g, bch], rng)
        u = leaf(rng, 3, 4, offset=0.5)
        v = leaf(rng, 3, 4, offset=-0.5)
        check_op(lambda: T.cosine_rows(u, v), [u, v], rng)
        parts = [leaf(rng, 2, 4) for _ in range(3)]
        check_op(lambda: T.stack(parts, axis=1), parts, rng)

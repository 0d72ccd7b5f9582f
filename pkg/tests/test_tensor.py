import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from makd import tensor as T
from makd.tensor import ShapeError, SVDConvergenceError, Tensor


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check_op_grad(build, inputs, rng, tol=1e-7):
    """Project the op output on a fixed random tensor and compare with central differences."""
    out = build(*inputs)
    proj = rng.normal(size=out.shape)

    def value():
        with T.no_grad():
            return float(np.sum(build(*inputs).data * proj))

    with T.GradientTape() as tape:
        loss = T.tensor_sum(build(*inputs) * Tensor(proj))
    grads = T.backward(loss, tape, inputs)
    for x in inputs:
        fd = T.finite_difference_grad(value, x.data, h=1e-6)
        np.testing.assert_allclose(grads[x], fd, rtol=1e-6, atol=tol)


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


# --------------------------------------------------------------------------
# forward values against independent oracles
# --------------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 4, 2), (5, 1, 7)])
def test_matmul_matches_triple_loop(shape):
    rng = np.random.default_rng(0)
    n, k, m = shape
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), atol=1e-12)


def test_batched_matmul_matches_loop_per_batch():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 5, 2))
    got = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(got[i, j], triple_loop_matmul(a[i, j], b[i, j]), atol=1e-12)


def test_linear_adds_bias_per_row():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    got = T.linear(Tensor(x), Tensor(w), Tensor(b)).data
    for i in range(2):
        np.testing.assert_allclose(got[i], triple_loop_matmul(x[i], w) + b, atol=1e-12)


def test_softmax_rows_sum_to_one_and_masked_entries_are_zero():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6)) * 10
    mask = np.ones((4, 6), dtype=bool)
    mask[1, 3:] = False
    mask[2, 0] = False
    y = T.softmax_rows(Tensor(x), mask).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-15)
    assert np.all(y[~mask] == 0.0)
    # hand-worked row: exp normalisation over the kept entries only
    row = np.exp(x[1, :3] - x[1, :3].max())
    np.testing.assert_allclose(y[1, :3], row / row.sum(), atol=1e-15)


def test_softmax_two_equal_logits_is_half():
    y = T.softmax_rows(Tensor(np.array([[0.3, 0.3]]))).data
    assert y.tolist() == [[0.5, 0.5]]


def test_softmax_rejects_fully_masked_row():
    with pytest.raises(ValueError, match="fully masked"):
        T.softmax_rows(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False, False, False]]))


def test_softmax_is_shift_invariant_for_large_logits():
    x = np.array([[1000.0, 1001.0, 999.0]])
    y = T.softmax_rows(Tensor(x)).data
    z = T.softmax_rows(Tensor(x - 1000.0)).data
    np.testing.assert_allclose(y, z, atol=1e-15)


def test_layer_norm_matches_definition():
    rng = np.random.default_rng(4)
    x, g, b = rng.normal(size=(3, 8)), rng.normal(size=8), rng.normal(size=8)
    got = T.layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=1e-5).data
    for i in range(3):
        mu = sum(x[i]) / 8
        var = sum((v - mu) ** 2 for v in x[i]) / 8
        np.testing.assert_allclose(got[i], (x[i] - mu) / math.sqrt(var + 1e-5) * g + b, atol=1e-12)


def test_layer_norm_requires_positive_eps():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


def test_gelu_exact_matches_erf_and_tanh_is_close():
    x = np.linspace(-6, 6, 121)
    exact = T.gelu(Tensor(x), approximate="none").data
    np.testing.assert_allclose(exact, 0.5 * x * (1 + erf(x / math.sqrt(2))), atol=1e-15)
    approx = T.gelu(Tensor(x), approximate="tanh").data
    assert np.max(np.abs(approx - exact)) < 1e-3
    assert T.gelu(Tensor(np.array(0.0))).data == 0.0


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = Tensor(np.zeros((2, 3, 7)))
    labels = np.array([[1, 2, 3], [4, 5, 6]])
    mask = np.array([[True, True, False], [True, False, False]])
    assert T.cross_entropy(logits, labels, mask).item() == pytest.approx(math.log(7), abs=1e-14)


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------


OPS = {
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 1)]),
    "sub": (lambda a, b: a - b, [(3, 2), (3, 2)]),
    "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b, eps=1e-5), [(3, 6), (6,), (6,)]),
    "gelu_tanh": (lambda x: T.gelu(x), [(4, 5)]),
    "gelu_erf": (lambda x: T.gelu(x, approximate="none"), [(4, 5)]),
    "softmax": (lambda x: T.softmax_rows(x), [(3, 5)]),
    "square_sum": (lambda x: T.square_sum(x), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    build, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs = [_param(rng, *s) for s in shapes]
    _check_op_grad(build, inputs, rng)


def test_masked_softmax_gradient_ignores_masked_entries():
    rng = np.random.default_rng(5)
    mask = np.array([[True, True, False, True], [False, True, True, True]])
    x = _param(rng, 2, 4)
    _check_op_grad(lambda a: T.softmax_rows(a, mask), [x], rng)


def test_embedding_gradient_accumulates_repeated_ids():
    w = Tensor(np.zeros((5, 3)), requires_grad=True)
    ids = np.array([[1, 1, 4]])
    with T.GradientTape() as tape:
        loss = T.tensor_sum(T.embedding(w, ids))
    g = T.backward(loss, tape, [w])[w]
    np.testing.assert_array_equal(g[:, 0], [0, 2, 0, 0, 1])


def test_index_gradient_scatters():
    rng = np.random.default_rng(6)
    x = _param(rng, 4, 3)
    _check_op_grad(lambda a: T.index(a, (np.array([0, 2, 2]),)), [x], rng)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(7)
    logits = _param(rng, 2, 3, 5)
    labels = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[True, False, True], [True, True, False]])

    def f():
        with T.no_grad():
            return T.cross_entropy(logits, labels, mask).item()

    with T.GradientTape() as tape:
        loss = T.cross_entropy(logits, labels, mask)
    g = T.backward(loss, tape, [logits])[logits]
    np.testing.assert_allclose(g, T.finite_difference_grad(f, logits.data, h=1e-6), atol=1e-8)
    assert np.all(g[~mask] == 0)


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.GradientTape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        T.backward(y, tape)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.GradientTape() as tape:
        with T.no_grad():
            x * 3.0
    assert tape.nodes == []


def test_unused_params_get_zero_gradients():
    x = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(4), requires_grad=True)
    with T.GradientTape() as tape:
        loss = T.square_sum(x)
    g = T.backward(loss, tape, [x, unused])
    np.testing.assert_array_equal(g[unused], 0.0)
    np.testing.assert_array_equal(g[x], 2.0)


# --------------------------------------------------------------------------
# SVD
# --------------------------------------------------------------------------


def _eigh_singular_values(w):
    g = w.T @ w if w.shape[1] <= w.shape[0] else w @ w.T
    return np.sqrt(np.clip(np.sort(np.linalg.eigh(g)[0])[::-1], 0, None))


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
@pytest.mark.parametrize("shape", [(1, 1), (5, 3), (3, 5), (16, 16), (40, 7)])
def test_svd_reconstructs_and_matches_gram_eigenvalues(method, shape):
    rng = np.random.default_rng(sum(shape))
    w = rng.normal(size=shape)
    u, s, v = T.svd(w, method=method)
    r = min(shape)
    assert u.shape == (shape[0], r) and v.shape == (shape[1], r) and s.shape == (r,)
    np.testing.assert_allclose((u * s) @ v.T, w, atol=1e-10)
    np.testing.assert_allclose(s, _eigh_singular_values(w), atol=1e-8)
    np.testing.assert_allclose(u.T @ u, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(r), atol=1e-10)
    assert np.all(np.diff(s) <= 1e-12)


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
def test_svd_sign_convention(method):
    w = np.random.default_rng(9).normal(size=(6, 4))
    u, _, _ = T.svd(w, method=method)
    idx = np.argmax(np.abs(u), axis=0)
    assert np.all(u[idx, np.arange(4)] > 0)


def test_jacobi_and_lapack_agree_after_sign_fix():
    w = np.random.default_rng(10).normal(size=(12, 9))
    u1, s1, v1 = T.svd(w, method="lapack")
    u2, s2, v2 = T.svd(w, method="jacobi")
    np.testing.assert_allclose(s1, s2, atol=1e-10)
    np.testing.assert_allclose(u1, u2, atol=1e-8)
    np.testing.assert_allclose(v1, v2, atol=1e-8)


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
def test_svd_rank_deficient_has_orthonormal_factors(method):
    rng = np.random.default_rng(11)
    w = rng.normal(size=(8, 2)) @ rng.normal(size=(2, 6))
    u, s, v = T.svd(w, method=method)
    assert np.all(s[2:] < 1e-10)
    np.testing.assert_allclose(u.T @ u, np.eye(6), atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(6), atol=1e-10)


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
def test_svd_of_zero_matrix(method):
    u, s, v = T.svd(np.zeros((4, 3)), method=method)
    np.testing.assert_array_equal(s, 0.0)
    np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-12)


def test_svd_rejects_bad_input():
    with pytest.raises(ShapeError):
        T.svd(np.zeros(3))
    with pytest.raises(ValueError):
        T.svd(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        T.svd(np.eye(2), method="power")


def test_jacobi_sweep_cap_raises():
    w = np.random.default_rng(12).normal(size=(20, 20))
    with pytest.raises(SVDConvergenceError):
        T.svd(w, method="jacobi", max_sweeps=1)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 12), m=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_jacobi_svd_property(n, m, seed):
    w = np.random.default_rng(seed).normal(size=(n, m))
    u, s, v = T.svd(w, method="jacobi")
    np.testing.assert_allclose((u * s) @ v.T, w, atol=1e-9)
    assert np.all(s >= 0)

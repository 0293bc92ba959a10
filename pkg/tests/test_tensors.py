"""Tests for the reverse-mode engine, its op set, and the gradient checker."""

import numpy as np
import pytest

from engine import tensors as T
from engine.tensors import ContractError, DimensionError, Graph, grad_check


def _conv_oracle(x, kernel, stride):
    h, w, _ = x.shape
    k = kernel.shape[0]
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((oh, ow, kernel.shape[3]))
    for i in range(oh):
        for j in range(ow):
            for p in range(k):
                for q in range(k):
                    out[i, j] += x[i * stride + p, j * stride + q] @ kernel[p, q]
    return out


def _value(fn, *arrays):
    g = Graph()
    return fn(*[g.constant(a) for a in arrays]).value


# ── matmul ─────────────────────────────────────────────────────────────────

def test_matmul_identity():
    """Identity times a matrix returns the matrix."""
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(_value(T.matmul, np.eye(2), m), m)


def test_matmul_dot_product():
    """[[1,2]] × [[3],[4]] is [[11]]."""
    assert _value(T.matmul, np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    """Misaligned inner dimensions raise a DimensionError quoting both shapes."""
    g = Graph()
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(g.constant(np.zeros((2, 3))), g.constant(np.zeros((2, 2))))


def test_matmul_gradient_matches_finite_differences():
    """Gradient of sum(A·B) w.r.t. both operands matches central differences."""
    rng = np.random.default_rng(0)
    params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))}
    report = grad_check(lambda g, p: T.total(T.matmul(p["a"], p["b"])), params)
    assert report.passed, report.failures()


def test_sum_of_linear_map_gradient():
    """loss = sum(W·x) gives grad(W)[i, j] = x[j] for every row i."""
    g = Graph()
    w = g.param("w", np.arange(6.0).reshape(2, 3))
    x = np.array([[1.0], [2.0], [3.0]])
    grads = g.backward(T.total(T.matmul(w, g.constant(x))))
    assert np.array_equal(grads["w"], np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]))


# ── softmax ────────────────────────────────────────────────────────────────

def test_softmax_symmetric_row():
    """Equal logits give a uniform row."""
    assert _value(T.softmax_rows, np.array([[0.0, 0.0]])).tolist() == [[0.5, 0.5]]


def test_softmax_large_logits_are_stable():
    """A 1000-logit gap underflows cleanly to [1, 0] without overflow."""
    y = _value(T.softmax_rows, np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(y))
    assert y[0, 0] == 1.0
    assert y[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    """Rows sum to 1 within 1e-12; adding a constant to every logit changes nothing."""
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = rng.standard_normal((3, 4)) * 10
        y = _value(T.softmax_rows, x)
        assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-12
        assert np.allclose(_value(T.softmax_rows, x + 7.5), y, rtol=0, atol=1e-12)


def test_softmax_jacobian_matches_finite_differences():
    """Backward through softmax agrees with central differences."""
    rng = np.random.default_rng(2)
    weights = rng.standard_normal((3, 4))
    params = {"x": rng.standard_normal((3, 4))}
    report = grad_check(lambda g, p: T.total(T.mul(T.softmax_rows(p["x"]), g.constant(weights))), params)
    assert report.passed, report.failures()


# ── convolutions ───────────────────────────────────────────────────────────

def test_conv2d_sum_pooling():
    """Constant 4×4 field v with an all-ones 2×2 kernel at stride 2 gives 4v."""
    x = np.full((4, 4, 1), 3.0)
    out = _value(lambda a, k: T.conv2d(a, k, stride=2), x, np.ones((2, 2, 1, 1)))
    assert out.shape == (2, 2, 1)
    assert np.array_equal(out, np.full((2, 2, 1), 12.0))


def test_conv2d_identity_kernel():
    """A 1×1 identity kernel at stride 1 returns the input."""
    x = np.random.default_rng(3).standard_normal((5, 4, 3))
    kernel = np.eye(3).reshape(1, 1, 3, 3)
    assert np.array_equal(_value(T.conv2d, x, kernel), x)


def test_conv2d_matches_loop_oracle():
    """Random 4×4×2 input with a 2×2×2×2 kernel at stride 2 matches nested loops."""
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 4, 2))
    kernel = rng.standard_normal((2, 2, 2, 2))
    out = _value(lambda a, k: T.conv2d(a, k, stride=2), x, kernel)
    assert np.allclose(out, _conv_oracle(x, kernel, 2), rtol=0, atol=1e-12)


def test_conv2d_kernel_larger_than_input():
    """A kernel that does not fit raises DimensionError."""
    g = Graph()
    with pytest.raises(DimensionError):
        T.conv2d(g.constant(np.zeros((2, 2, 1))), g.constant(np.zeros((3, 3, 1, 1))))


def test_conv_transpose_replicates():
    """1×1 input v, all-ones 2×2 kernel at stride 2 → 2×2 field of v."""
    out = _value(lambda a, k: T.conv_transpose2d(a, k, stride=2), np.full((1, 1, 1), 2.5), np.ones((2, 2, 1, 1)))
    assert np.array_equal(out, np.full((2, 2, 1), 2.5))


def test_conv_transpose_zero_input():
    """Zero input maps to zero output."""
    kernel = np.random.default_rng(5).standard_normal((2, 2, 3, 2))
    out = _value(lambda a, k: T.conv_transpose2d(a, k, stride=2), np.zeros((2, 2, 2)), kernel)
    assert out.shape == (4, 4, 3)
    assert not out.any()


@pytest.mark.parametrize("stride,padding", [(2, 0), (1, 0), (2, 1)])
def test_conv_adjoint_identity(stride, padding):
    """⟨conv2d(x, K), y⟩ = ⟨x, conv_transpose2d(y, K)⟩ on 100 seeded pairs."""
    rng = np.random.default_rng(6)
    for _ in range(100):
        x = rng.standard_normal((4, 4, 2))
        kernel = rng.standard_normal((2, 2, 2, 3))
        cx = _value(lambda a, k: T.conv2d(a, k, stride=stride, padding=padding), x, kernel)
        y = rng.standard_normal(cx.shape)
        ty = _value(lambda a, k: T.conv_transpose2d(a, k, stride=stride, padding=padding), y, kernel)
        assert ty.shape == x.shape
        lhs, rhs = float(np.sum(cx * y)), float(np.sum(x * ty))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_conv_gradients_match_finite_differences():
    """Both convolutions are differentiable w.r.t. input and kernel."""
    rng = np.random.default_rng(7)
    params = {"x": rng.standard_normal((4, 4, 2)), "k": rng.standard_normal((2, 2, 2, 2))}
    weights = rng.standard_normal((4, 4, 2))

    def loss(g, p):
        down = T.conv2d(p["x"], p["k"], stride=2)
        up = T.conv_transpose2d(down, p["k"], stride=2)
        return T.total(T.mul(up, g.constant(weights)))

    report = grad_check(loss, params)
    assert report.passed, report.failures()


# ── layer norm / gelu ──────────────────────────────────────────────────────

def _norm(x, eps):
    g = Graph()
    d = x.shape[-1]
    return T.layer_norm(g.constant(x), g.constant(np.ones(d)), g.constant(np.zeros(d)), eps).value


def test_layer_norm_constant_token_is_zero():
    """Zero variance is absorbed by eps; the output is all zeros."""
    assert np.array_equal(_norm(np.full((1, 4), 3.0), 1e-5), np.zeros((1, 4)))


def test_layer_norm_normalized_token_unchanged():
    """[1, −1] already has mean 0 and variance 1."""
    assert np.allclose(_norm(np.array([[1.0, -1.0]]), 1e-12), [[1.0, -1.0]], atol=1e-9)


def test_layer_norm_statistics():
    """Output mean is 0 and variance is var/(var + eps)."""
    x = np.random.default_rng(8).standard_normal((1, 16)) * 3 + 2
    y = _norm(x, 1e-5)
    var = x.var()
    assert abs(y.mean()) < 1e-12
    assert abs(y.var() - var / (var + 1e-5)) < 1e-9


def test_layer_norm_rejects_nonpositive_eps():
    """eps must be positive."""
    with pytest.raises(ContractError):
        _norm(np.ones((1, 2)), 0.0)


def test_gelu_values():
    """gelu(0) = 0 and gelu(10) ≈ 10."""
    y = _value(T.gelu, np.array([0.0, 10.0]))
    assert y[0] == 0.0
    assert abs(y[1] - 10.0) < 1e-10


def test_gelu_derivative_matches_finite_differences():
    """Analytic gelu slope at random points is within 1e-6 of central differences."""
    x = np.random.default_rng(15).standard_normal(20) * 3
    g = Graph()
    v = g.param("x", x)
    slope = g.backward(T.total(T.gelu(v)))["x"]
    h = 1e-5
    numeric = (_value(T.gelu, x + h) - _value(T.gelu, x - h)) / (2 * h)
    assert np.max(np.abs(slope - numeric)) < 1e-6


def test_gelu_and_layer_norm_gradients():
    """Derivatives of gelu and layer_norm agree with central differences."""
    rng = np.random.default_rng(9)
    params = {"x": rng.standard_normal((3, 5)), "gamma": rng.standard_normal(5), "beta": rng.standard_normal(5)}
    weights = rng.standard_normal((3, 5))

    def loss(g, p):
        return T.total(T.mul(T.gelu(T.layer_norm(p["x"], p["gamma"], p["beta"])), g.constant(weights)))

    report = grad_check(loss, params)
    assert report.passed, report.failures()


# ── graph / backward ───────────────────────────────────────────────────────

def test_backward_needs_scalar_loss():
    """A non-scalar loss is a contract error."""
    g = Graph()
    w = g.param("w", np.ones((2, 2)))
    with pytest.raises(ContractError):
        g.backward(w)


def test_unused_parameter_gets_zero_gradient():
    """Trainable leaves the loss does not reach get zero gradients of their shape."""
    g = Graph()
    used = g.param("used", np.array([1.0, 2.0]))
    g.param("unused", np.ones((3, 2)))
    grads = g.backward(T.total(T.mul(used, used)))
    assert np.array_equal(grads["used"], np.array([2.0, 4.0]))
    assert np.array_equal(grads["unused"], np.zeros((3, 2)))


def test_frozen_parameters_have_no_gradient_entry():
    """Non-trainable leaves are left out of the gradient dict."""
    g = Graph()
    bound = g.bind({"a": np.ones(2), "b": np.ones(2)}, trainable=lambda name: name == "a")
    grads = g.backward(T.total(T.mul(bound["a"], bound["b"])))
    assert list(grads) == ["a"]


def test_shared_leaf_accumulates_gradients():
    """A leaf used twice receives the sum of both paths."""
    g = Graph()
    x = g.param("x", np.array([3.0]))
    grads = g.backward(T.total(T.add(T.scale(x, 2.0), T.mul(x, x))))
    assert grads["x"].tolist() == [8.0]


def test_ops_are_deterministic():
    """Identical inputs give bit-identical outputs and gradients."""
    rng = np.random.default_rng(10)
    params = {"x": rng.standard_normal((4, 4, 2)), "k": rng.standard_normal((2, 2, 2, 2))}

    def run():
        g = Graph()
        p = g.bind(params)
        loss = T.total(T.softmax_rows(T.reshape(T.conv2d(p["x"], p["k"], stride=2), (2, 4))))
        return loss.item(), g.backward(loss)

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_peak_bytes_counts_forward_storage():
    """The allocation counter grows with the arrays the forward stores."""
    g = Graph()
    a = g.constant(np.zeros((10, 10)))
    before = g.peak_bytes
    T.matmul(a, a)
    assert before == 800
    assert g.peak_bytes == 1600


def test_gather_scatter_gradients():
    """gather_rows and scatter_rows (with repeated indices) pass the gradient check."""
    rng = np.random.default_rng(11)
    index = np.array([[0, 2], [2, 3]])
    params = {"x": rng.standard_normal((4, 3))}
    weights = rng.standard_normal((5, 3))

    def loss(g, p):
        rows = T.gather_rows(p["x"], index)
        return T.total(T.mul(T.scatter_rows(rows, index, 5), g.constant(weights)))

    report = grad_check(loss, params)
    assert report.passed, report.failures()


# ── grad_check ─────────────────────────────────────────────────────────────

def test_grad_check_quadratic():
    """‖θ‖² has gradient 2θ; relative error is below 1e-8."""
    rng = np.random.default_rng(12)
    params = {"theta": rng.uniform(0.5, 2.0, 10) * rng.choice([-1.0, 1.0], 10)}
    report = grad_check(lambda g, p: T.total(T.mul(p["theta"], p["theta"])), params, tolerance=1e-8)
    assert report.passed
    assert report.max_rel_error < 1e-8


def test_grad_check_catches_corrupted_rule():
    """Scaling the mul backward rule is reported as a failure, not raised."""
    params = {"theta": np.random.default_rng(13).standard_normal(10)}
    report = grad_check(lambda g, p: T.total(T.mul(p["theta"], p["theta"])), params, corrupt_ops=("mul",))
    assert not report.passed
    assert [p.name for p in report.failures()] == ["theta"]
    assert report.max_rel_error == pytest.approx(1.0 / 3.0, rel=1e-6)


def test_grad_check_subsamples_large_tensors():
    """Above max_samples only a seeded subsample is checked."""
    params = {"theta": np.random.default_rng(14).standard_normal(200)}
    report = grad_check(lambda g, p: T.total(T.mul(p["theta"], p["theta"])), params, max_samples=16)
    assert report.params[0].checked == 16
    assert report.passed


def test_grad_check_rejects_nonpositive_step():
    """step must be positive."""
    with pytest.raises(ContractError):
        grad_check(lambda g, p: T.total(p["x"]), {"x": np.ones(2)}, step=0.0)

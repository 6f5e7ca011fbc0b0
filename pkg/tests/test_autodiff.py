import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskbert.autodiff import (
    IGNORE_INDEX,
    GradTape,
    Tensor,
    backward,
    concat,
    cross_entropy,
    exp,
    gather_rows,
    gelu,
    log,
    log_softmax,
    matmul,
    mean,
    precision,
    sigmoid,
    silu,
    softmax,
    tsum,
)
from deskbert.gradcheck import grad_check


def test_gradient_of_product_rule():
    a = Tensor([2.0, -3.0], requires_grad=True)
    b = Tensor([0.5, 4.0], requires_grad=True)
    with GradTape():
        loss = (a * b + a).sum()
    g = backward(loss)
    np.testing.assert_allclose(g[a].data, [1.5, 5.0])
    np.testing.assert_allclose(b.grad.data, [2.0, -3.0])


def test_backward_rejects_non_scalar_and_untaped():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape():
        y = a * 2.0
    with pytest.raises(ValueError):
        backward(y)
    with pytest.raises(ValueError):
        backward((Tensor([1.0], requires_grad=True) * 2.0).sum())


def test_no_tape_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    y = a * 3.0
    assert not y.requires_grad


def test_broadcast_gradient_sums_over_expanded_axes():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    with GradTape():
        loss = (x + b).sum()
    backward(loss)
    np.testing.assert_allclose(b.grad.data, [3, 3, 3, 3])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\) x \(4, 5\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_softmax_fully_masked_row_is_zero():
    x = Tensor([[0.0, 1.0], [-np.inf, -np.inf]])
    y = softmax(x)
    np.testing.assert_allclose(y.data, [[1 / (1 + np.e), np.e / (1 + np.e)], [0, 0]], rtol=1e-6)
    assert y.masked_rows.tolist() == [False, True]


def test_cross_entropy_ignores_sentinel_and_rejects_empty():
    logits = Tensor(np.zeros((3, 5)))
    assert cross_entropy(logits, [1, IGNORE_INDEX, 2]).item() == pytest.approx(np.log(5), rel=1e-6)
    with pytest.raises(ValueError, match="empty loss"):
        cross_entropy(logits, [IGNORE_INDEX] * 3)


@pytest.mark.parametrize(
    "fn",
    [
        lambda x, w: (exp(x) * w).sum(),
        lambda x, w: (log(x * x + 1.0) * w).sum(),
        lambda x, w: (sigmoid(x) * w).sum(),
        lambda x, w: (silu(x) * w).sum(),
        lambda x, w: (gelu(x) * w).sum(),
        lambda x, w: (softmax(x, axis=-1) * w).sum(),
        lambda x, w: (log_softmax(x, axis=0) * w).sum(),
        lambda x, w: (x / (w * w + 1.0)).mean(),
        lambda x, w: (x**3).sum() + tsum(x * w, axis=1).sum(),
        lambda x, w: (matmul(x, w.T) * 0.5).sum(),
        lambda x, w: (gather_rows(x, [2, 0, 2]) * 2.0).sum(),
        lambda x, w: (concat([x, w], axis=1) ** 2).sum(),
        lambda x, w: mean(x.reshape(4, 3).transpose() * 1.5),
    ],
)
def test_primitive_gradients(fn, rng):
    for _ in range(3):
        w = Tensor(rng.normal(size=(3, 4)))
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert grad_check(lambda t: fn(t, w), x) < 1e-4


def test_cross_entropy_gradient(rng):
    targets = [1, IGNORE_INDEX, 0, 3]
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    assert grad_check(lambda t: cross_entropy(t, targets), x) < 1e-5


def test_precision_switches_storage():
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_shared_input_accumulates_gradient():
    a = Tensor([3.0], requires_grad=True)
    with GradTape():
        loss = (a * a * a).sum()
    backward(loss)
    assert a.grad.item() == pytest.approx(27.0)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_log_softmax_normalizes(values):
    y = log_softmax(Tensor(np.array(values)))
    assert float(np.exp(y.data.astype(np.float64)).sum()) == pytest.approx(1.0, abs=1e-5)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_matmul_matches_numpy(n, k, m):
    rng = np.random.default_rng(n * 100 + k * 10 + m)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-5, atol=1e-5)

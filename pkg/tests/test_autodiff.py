import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad, grad_of, loss_value, rel_err
from moe_lab import autodiff as ad
from moe_lab.autodiff import Tensor
from moe_lab.errors import NumericError, UsageError
from moe_lab.rng import Rng


def sq(t):
    return t * t


def check_grad(fn, x, tol=1e-7):
    g = grad_of(fn, x)
    assert rel_err(g, fd_grad(lambda t: loss_value(fn, t), x)) < tol


def test_softmax_reference_values():
    p = ad.softmax(Tensor([[3.0, 1.0, 2.0]])).data[0]
    np.testing.assert_allclose(p, [0.6652, 0.0900, 0.2447], atol=5e-5)
    assert p.sum() == pytest.approx(1.0, abs=1e-15)


def test_softplus_at_zero_is_ln2():
    assert ad.softplus(Tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-15)


def test_softmax_is_shift_invariant_and_stable():
    z = np.array([[1000.0, 999.0, 998.0]])
    np.testing.assert_allclose(ad.softmax(Tensor(z)).data, ad.softmax(Tensor(z - 1000)).data, rtol=1e-15)


@pytest.mark.parametrize("name, fn", [
    ("exp", lambda t: ad.sum(ad.exp(t))),
    ("log", lambda t: ad.sum(ad.log(t * t + 1.0))),
    ("sqrt", lambda t: ad.sum(ad.sqrt(t * t + 0.5))),
    ("softplus", lambda t: ad.sum(ad.softplus(t) * t)),
    ("ndtr", lambda t: ad.sum(ad.ndtr(t) * t)),
    ("div", lambda t: ad.sum(t / (t * t + 2.0))),
    ("softmax", lambda t: ad.sum(ad.softmax(ad.reshape(t, (2, 3))) * np.arange(6.0).reshape(2, 3))),
    ("log_softmax", lambda t: ad.sum(ad.log_softmax(ad.reshape(t, (3, 2)))[:, 0])),
    ("matmul", lambda t: ad.sum(sq(ad.matmul(ad.reshape(t, (2, 3)), ad.transpose(ad.reshape(t, (2, 3))))))),
    ("mean", lambda t: ad.mean(t * t, axis=0) * 3.0),
    ("take", lambda t: ad.sum(sq(ad.take(t, np.array([0, 0, 5, 2]))) * t[0])),
    ("scatter", lambda t: ad.sum(sq(ad.scatter((8,), np.array([1, 1, 7, 0, 2, 3]), t)))),
    ("concat", lambda t: ad.sum(sq(ad.concat([t, t * 2.0])))),
    ("view", lambda t: ad.sum(ad.matmul(ad.view(t, 0, (2, 2)), ad.view(t, 2, (2, 2))))),
    ("broadcast", lambda t: ad.sum(ad.reshape(t, (2, 3)) * ad.reshape(t, (2, 3))[0:1, :])),
    ("where", lambda t: ad.sum(ad.where(np.arange(6) % 2 == 0, t * t, t * 3.0))),
])
def test_op_gradients_match_finite_differences(name, fn):
    x = Rng(7, name).normal(6) + 0.1
    check_grad(lambda t: ad.sum(fn(t)) if fn(t).size > 1 else fn(t), x)


def test_cross_entropy_matches_log_softmax():
    rng = Rng(0, "ce")
    logits, y = rng.normal((5, 4)), np.array([0, 3, 1, 1, 2])
    ce = ad.cross_entropy(Tensor(logits), y).item()
    ref = -ad.log_softmax(Tensor(logits)).data[np.arange(5), y].mean()
    assert ce == pytest.approx(ref, rel=1e-14)
    check_grad(lambda t: ad.cross_entropy(ad.reshape(t, (5, 4)), y), logits.ravel())


def test_relu_derivative_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    ad.backward(ad.sum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_reused_node_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    ad.backward(ad.sum(y * y + y))
    np.testing.assert_allclose(x.grad, [4 * 8 + 4])


def test_hvp_on_quadratic_is_exact():
    a = Rng(1, "quad").normal((5, 5))
    h = a @ a.T
    v = Rng(2, "quad").normal(5)
    fn = lambda t: 0.5 * ad.sum(t * ad.matmul(ad.reshape(t, (1, 5)), h)[0])
    np.testing.assert_allclose(ad.hvp(fn, np.ones(5), v), h @ v, rtol=1e-12)


def test_grad_and_hvp_returns_plain_gradient_too():
    fn = lambda t: ad.sum(ad.exp(t) * t)
    x, v = np.array([0.1, -0.5]), np.array([1.0, 2.0])
    g, hv = ad.grad_and_hvp(fn, x, v)
    np.testing.assert_allclose(g, np.exp(x) * (1 + x), rtol=1e-14)
    np.testing.assert_allclose(hv, np.exp(x) * (2 + x) * v, rtol=1e-14)


def _small_net(t):
    x = np.array([[0.3, -1.2, 0.7], [1.1, 0.2, -0.4]])
    w1 = ad.view(t, 0, (3, 4))
    w2 = ad.view(t, 12, (4, 2))
    h = ad.softplus(ad.matmul(x, w1))
    return ad.cross_entropy(ad.matmul(h, w2), np.array([0, 1]))


THETA = Rng(3, "net").normal(20)
vectors = st.lists(st.floats(-3, 3, allow_nan=False), min_size=20, max_size=20).map(np.array)


@settings(max_examples=25, deadline=None)
@given(vectors, vectors, st.floats(-4, 4))
def test_hvp_is_linear(u, w, c):
    lhs = ad.hvp(_small_net, THETA, c * u + w)
    rhs = c * ad.hvp(_small_net, THETA, u) + ad.hvp(_small_net, THETA, w)
    assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, np.abs(rhs).max())


@settings(max_examples=25, deadline=None)
@given(vectors, vectors)
def test_hvp_is_symmetric(u, w):
    a = u @ ad.hvp(_small_net, THETA, w)
    b = w @ ad.hvp(_small_net, THETA, u)
    assert abs(a - b) <= 1e-8 * max(1.0, abs(a))


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        ad.backward(x * 2.0)


def test_backward_requires_grad():
    with pytest.raises(UsageError):
        ad.backward(ad.sum(Tensor(np.ones(3))))


def test_shape_mismatch_is_usage_error():
    with pytest.raises(UsageError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(UsageError):
        ad.hvp(lambda t: ad.sum(t), np.ones(3), np.ones(2))


@np.errstate(all="ignore")
def test_non_finite_values_raise_numeric_error():
    with pytest.raises(NumericError, match="log"):
        ad.log(Tensor(np.array([-1.0])))
    with pytest.raises(NumericError):
        ad.exp(Tensor(np.array([1000.0])))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(4), requires_grad=True)
    before = ad.node_count()
    with ad.no_grad():
        y = ad.sum(ad.exp(x) * x)
    assert ad.node_count() == before
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_intermediate_grads_are_released():
    x = Tensor(np.ones(3), requires_grad=True)
    mid = ad.exp(x)
    ad.backward(ad.sum(mid * mid))
    assert mid.grad is None
    assert x.grad is not None


def test_numpy_array_on_left_of_matmul():
    w = Tensor(np.eye(2) * 3.0, requires_grad=True)
    out = np.array([[1.0, 2.0]]) @ w
    np.testing.assert_array_equal(out.data, [[3.0, 6.0]])

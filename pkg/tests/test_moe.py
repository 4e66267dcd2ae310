import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import fd_grad, grad_of, loss_value, rel_err
from moe_lab import autodiff as ad
from moe_lab import moe
from moe_lab.autodiff import Tensor
from moe_lab.errors import ConfigError, InternalError, NumericError, UsageError
from moe_lab.rng import Rng


def test_topk_weights_reference_example():
    sel, w = moe.topk_weights([3.0, 1.0, 2.0], 2)
    np.testing.assert_array_equal(sel, [[0, 2]])
    np.testing.assert_allclose(w[0], [0.7311, 0.0, 0.2689], atol=5e-5)
    assert w[0, 1] == 0.0


def test_topk_ties_prefer_lower_index():
    np.testing.assert_array_equal(moe.select_topk(np.array([[1.0, 2.0, 2.0, 2.0]]), 2), [[1, 2]])


def test_topk_with_k_equal_n_is_softmax():
    z = np.array([[0.3, -1.0, 2.0]])
    _, w = moe.topk_weights(z, 3)
    np.testing.assert_allclose(w, ad.softmax(Tensor(z)).data, rtol=1e-14)


def test_topk_rejects_k_out_of_range():
    with pytest.raises(ConfigError):
        moe.topk_weights([1.0, 2.0], 3)


def _gate_inputs(b=6, d=5, n=4, seed=0):
    rng = Rng(seed, "gate")
    return rng.normal((b, d)), rng.normal((d, n)), rng.normal(n), 0.3 * rng.normal((d, n))


def test_standardized_logits_have_zero_mean_unit_std():
    z = moe.standardize(Tensor(Rng(0).normal((4, 8)) * 5 + 3)).data
    np.testing.assert_allclose(z.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=1), 1, atol=1e-5)


def test_standardize_single_expert_is_finite_and_differentiable():
    x = Tensor(np.array([[2.0], [-1.0]]), requires_grad=True)
    ad.backward(ad.sum(moe.standardize(x)))
    assert np.isfinite(x.grad).all()


def test_eval_gate_matches_numpy_reference():
    h, wg, bg, wn = _gate_inputs()
    r = moe.gate_noisy_topk(h, wg, bg, wn, k=2)
    z = h @ wg + bg
    z = (z - z.mean(1, keepdims=True)) / (np.sqrt(z.var(1, keepdims=True) + 1e-12) + 1e-6)
    sel, w = moe.topk_weights(z, 2)
    np.testing.assert_array_equal(r.decision.selected, sel)
    np.testing.assert_allclose(r.decision.weights, w, rtol=1e-13)
    np.testing.assert_array_equal(r.decision.noisy_logits, r.decision.clean_logits)


def test_training_noise_scale_is_softplus():
    h, wg, bg, wn = _gate_inputs()
    r = moe.gate_noisy_topk(h, wg, bg, wn, k=2, rng=Rng(1), training=True)
    np.testing.assert_allclose(r.decision.noise_std, np.logaddexp(0, h @ wn), rtol=1e-13)
    eps = Rng(1).normal(r.decision.clean_logits.shape)
    np.testing.assert_allclose(r.decision.noisy_logits,
                               r.decision.clean_logits + eps * r.decision.noise_std, rtol=1e-13)


def test_training_gate_needs_rng():
    h, wg, bg, wn = _gate_inputs()
    with pytest.raises(UsageError):
        moe.gate_noisy_topk(h, wg, bg, wn, k=2, training=True)
    with pytest.raises(ConfigError):
        moe.gate_noisy_topk(h, wg, bg, wn, k=5)


def test_gate_gradients_match_finite_differences():
    h, wg, bg, wn = _gate_inputs()
    target = Rng(3).normal((6, 4))

    def fn(t):
        r = moe.gate_noisy_topk(h, ad.reshape(t, wg.shape), bg, wn, k=2, rng=Rng(4), training=True)
        return ad.sum(r.weights * target)

    x = wg.ravel()
    assert rel_err(grad_of(fn, x), fd_grad(lambda t: loss_value(fn, t), x)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-5, 5)), st.integers(1, 6))
def test_routing_rows_sum_to_one(logits, k):
    _, w = moe.topk_weights(logits, k)
    np.testing.assert_allclose(w.sum(axis=1), 1, atol=1e-12)
    assert ((w > 0).sum(axis=1) <= k).all()
    soft = moe.gate_soft(logits, np.eye(6)).decision.weights
    np.testing.assert_allclose(soft.sum(axis=1), 1, atol=1e-12)


def test_combine_mixes_outputs():
    w = np.array([[0.25, 0.75], [1.0, 0.0]])
    outs = {0: Tensor(np.ones((2, 3))), 1: Tensor(np.full((2, 3), 2.0))}
    np.testing.assert_allclose(moe.combine(w, outs).data, [[1.75] * 3, [1.0] * 3])


def test_combine_single_vector():
    y = moe.combine(np.array([0.5, 0.5]), {0: Tensor([1.0, 0.0]), 1: Tensor([0.0, 1.0])})
    np.testing.assert_allclose(y.data, [[0.5, 0.5]])


def test_combine_missing_expert_is_internal_error():
    with pytest.raises(InternalError):
        moe.combine(np.array([[0.5, 0.5]]), {0: Tensor(np.ones((1, 2)))})


def test_dispatch_combine_equals_dense_combine():
    h, wg, bg, wn = _gate_inputs(b=10, n=4)
    r = moe.gate_noisy_topk(h, wg, bg, wn, k=2)
    mats = [Rng(i, "expert").normal((5, 3)) for i in range(4)]
    experts = [lambda x, m=m: ad.matmul(x, m) for m in mats]
    sparse = moe.dispatch_combine(Tensor(h), r, experts, 3).data
    dense = moe.combine(r.weights, {i: e(Tensor(h)) for i, e in enumerate(experts)}).data
    np.testing.assert_allclose(sparse, dense, rtol=1e-13, atol=1e-15)


def test_dispatch_combine_runs_experts_only_on_routed_rows():
    h, wg, bg, wn = _gate_inputs(b=10, n=4)
    r = moe.gate_noisy_topk(h, wg, bg, wn, k=1)
    seen = {}

    def make(i):
        def expert(x):
            seen[i] = x.shape[0]
            return ad.matmul(x, np.ones((5, 2)))
        return expert

    moe.dispatch_combine(Tensor(h), r, [make(i) for i in range(4)], 2)
    counts = np.bincount(r.decision.selected[:, 0], minlength=4)
    assert seen == {i: int(c) for i, c in enumerate(counts) if c}


def test_kl_uniform_reference_values():
    assert moe.loss_kl_uniform(np.array([[1.0, 0, 0, 0]])).item() == pytest.approx(np.log(4), abs=1e-15)
    assert moe.loss_kl_uniform(np.full((3, 4), 0.25)).item() == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-6, 6)))
def test_kl_uniform_is_nonnegative(logits):
    w = ad.softmax(Tensor(logits))
    assert moe.loss_kl_uniform(w).item() >= -1e-12


def test_importance_reference_value():
    assert moe.loss_importance(np.array([[1.0, 0.0], [1.0, 0.0]])).item() == pytest.approx(1.0)
    assert moe.loss_importance(np.full((4, 2), 0.5)).item() == 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(0.01, 10)), st.floats(0.01, 100))
def test_cv_squared_is_scale_invariant(x, c):
    a = moe.cv_squared(Tensor(x)).item()
    assert moe.cv_squared(Tensor(c * x)).item() == pytest.approx(a, rel=1e-9, abs=1e-12)


def test_balancing_losses_reject_unnormalised_rows():
    with pytest.raises(NumericError):
        moe.loss_importance(np.array([[0.5, 0.2]]))
    with pytest.raises(NumericError):
        moe.loss_kl_uniform(np.array([[0.5, 0.6]]))


def test_load_probabilities_match_monte_carlo():
    """Redraw only expert i's noise and count how often it stays in the top k."""
    rng = Rng(11, "load-mc")
    n, k, samples = 5, 2, 100_000
    clean = rng.normal((1, n))
    sigma = 0.5 + rng.uniform(0, 1, (1, n))
    noisy = clean + sigma * rng.normal((1, n))
    p = moe.load_probabilities(Tensor(clean), Tensor(sigma), Tensor(noisy), k).data[0]
    for i in range(n):
        draws = np.repeat(noisy, samples, axis=0)
        draws[:, i] = clean[0, i] + sigma[0, i] * rng.normal(samples)
        hit = (moe.select_topk(draws, k) == i).any(axis=1).mean()
        se = np.sqrt(p[i] * (1 - p[i]) / samples)
        assert abs(hit - p[i]) <= 3 * se + 1e-12, (i, hit, p[i])


def test_load_probabilities_all_ones_when_k_covers_all():
    z = Tensor(np.zeros((2, 3)))
    np.testing.assert_array_equal(moe.load_probabilities(z, Tensor(np.ones((2, 3))), z, 3).data, 1.0)


def test_load_rejects_nonpositive_sigma():
    z = Tensor(np.zeros((1, 3)))
    with pytest.raises(NumericError):
        moe.load_probabilities(z, Tensor(np.array([[1.0, 0.0, 1.0]])), z, 1)


def test_load_loss_gradient():
    h, wg, bg, wn = _gate_inputs(b=8)

    def fn(t):
        r = moe.gate_noisy_topk(h, wg, bg, ad.reshape(t, wn.shape), k=2, rng=Rng(2), training=True)
        return moe.loss_load(r.clean, r.noise_std, r.noisy, 2)

    x = wn.ravel()
    assert rel_err(grad_of(fn, x), fd_grad(lambda t: loss_value(fn, t), x)) < 1e-6


def test_routing_stats():
    _, w = moe.topk_weights(np.array([[3.0, 1, 2], [0, 5, 1], [2, 2, 0]]), 1)
    d = moe.GateDecision("hard", w, None, w, np.argmax(w, 1)[:, None], w)
    s = moe.routing_stats(d, np.array([0, 1, 0]), num_classes=3)
    np.testing.assert_allclose(s.utilization, [2 / 3, 1 / 3, 0])
    np.testing.assert_allclose(s.class_expert, [[1, 0, 0], [0, 1, 0], [0, 0, 0]])
    np.testing.assert_array_equal(s.class_counts, [2, 1, 0])
    assert s.entropy() == pytest.approx(-(2 / 3 * np.log(2 / 3) + 1 / 3 * np.log(1 / 3)))
    with pytest.raises(UsageError):
        moe.routing_stats(d, np.array([0, 1]))

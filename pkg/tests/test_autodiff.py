import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ldae import autodiff as ad


def _rng(seed=0):
    return ad.RngStream(seed)


def check(f, params, tol=1e-6):
    err = ad.finite_diff_check(f, params)
    assert err <= tol, f"max relative gradient error {err:.3e}"


def test_add_mul_matmul_grads():
    rng = _rng(1)
    a, b = rng.normal(3, 4), rng.normal(3, 4)
    check(lambda leaves: ad.total(ad.mul(ad.add(leaves[0], leaves[1]), leaves[0])), [a, b])
    w = rng.normal(4, 2)
    check(lambda leaves: ad.total(ad.matmul(leaves[0], leaves[1])), [a, w])


def test_bias_broadcast_grad():
    rng = _rng(2)
    x, bias = rng.normal(5, 3), rng.normal(1, 3)
    check(lambda leaves: ad.total(ad.add(leaves[0], leaves[1])), [x, bias])


def test_sub_scale_transpose_grads():
    rng = _rng(3)
    a, b = rng.normal(2, 3), rng.normal(2, 3)
    check(lambda leaves: ad.total(ad.sub(leaves[0], ad.scale(leaves[1], 2.5))), [a, b])
    check(lambda leaves: ad.total(ad.matmul(ad.transpose(leaves[0]), leaves[1])), [a, b])


def test_relu_sigmoid_grads():
    rng = _rng(4)
    # Keep activations away from the ReLU kink for clean finite differences.
    x = rng.normal(4, 4) + np.sign(rng.normal(4, 4)) * 0.1
    check(lambda leaves: ad.total(ad.relu(leaves[0])), [x])
    check(lambda leaves: ad.total(ad.sigmoid(leaves[0])), [x])


def test_softmax_grad_and_rowsums():
    rng = _rng(5)
    x = rng.normal(4, 6)
    weight = rng.normal(4, 6)
    check(
        lambda leaves: ad.total(ad.mul(ad.softmax_rows(leaves[0]), weight)), [x]
    )
    s = ad.softmax_rows(ad.Tensor(x)).data
    assert np.allclose(s.sum(axis=1), 1.0)
    assert np.all(s > 0)


def test_layer_norm_grad_and_stats():
    rng = _rng(6)
    x, gamma, beta = rng.normal(3, 8), rng.normal(1, 8), rng.normal(1, 8)
    check(
        lambda leaves: ad.total(ad.layer_norm(leaves[0], leaves[1], leaves[2])),
        [x, gamma, beta],
        tol=1e-5,
    )
    out = ad.layer_norm(ad.Tensor(x), ad.Tensor(np.ones(8)), ad.Tensor(np.zeros(8))).data
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-9)
    assert np.allclose(out.var(axis=1), 1.0, atol=1e-3)


def test_layer_norm_eps_check():
    with pytest.raises(ValueError):
        ad.layer_norm(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)), eps=0.0)


def test_bce_and_logits_agree():
    rng = _rng(7)
    z = rng.normal(6, 1)
    t = (rng.normal(6, 1) > 0).astype(float)
    direct = ad.bce_with_logits(ad.Tensor(z), t).item()
    via_probs = ad.bce(ad.sigmoid(ad.Tensor(z)), t).item()
    assert abs(direct - via_probs) < 1e-9


def test_bce_grads():
    rng = _rng(8)
    z = rng.normal(5, 2)
    t = (rng.normal(5, 2) > 0).astype(float)
    check(lambda leaves: ad.bce_with_logits(leaves[0], t), [z])
    p = 1.0 / (1.0 + np.exp(-z))
    check(lambda leaves: ad.bce(leaves[0], t), [p])


def test_bce_extreme_logits_stable():
    z = np.array([[500.0], [-500.0]])
    t = np.array([[1.0], [0.0]])
    assert ad.bce_with_logits(ad.Tensor(z), t).item() < 1e-9


def test_mean_total_grads():
    rng = _rng(9)
    x = rng.normal(3, 5)
    check(lambda leaves: ad.mean(leaves[0]), [x])
    check(lambda leaves: ad.total(leaves[0]), [x])


def test_gather_slice_concat_grads():
    rng = _rng(10)
    x = rng.normal(6, 4)
    idx = np.array([0, 2, 2, 5])
    weight = rng.normal(4, 4)
    check(lambda leaves: ad.total(ad.mul(ad.gather_rows(leaves[0], idx), weight)), [x])
    w2 = rng.normal(6, 2)
    check(lambda leaves: ad.total(ad.mul(ad.slice_cols(leaves[0], 1, 3), w2)), [x])
    a, b = rng.normal(3, 2), rng.normal(3, 3)
    w3 = rng.normal(3, 5)
    check(lambda leaves: ad.total(ad.mul(ad.concat_cols([leaves[0], leaves[1]]), w3)), [a, b])


def test_backward_requires_scalar():
    t = ad.Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        t.backward()


def test_matmul_shape_check():
    with pytest.raises(ValueError):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))


def test_grad_accumulates_over_reuse():
    x = ad.Tensor(np.array([[2.0]]), requires_grad=True)
    out = ad.total(ad.mul(x, x))
    out.backward()
    assert x.grad[0, 0] == pytest.approx(4.0)


def test_finite_diff_eps_range():
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda leaves: ad.total(leaves[0]), [np.ones((1, 1))], eps=1.0)


def test_check_finite_flag():
    ad.CHECK_FINITE = True
    try:
        with pytest.raises(FloatingPointError):
            ad.scale(ad.Tensor(np.array([np.inf])), 1.0)
    finally:
        ad.CHECK_FINITE = False


def test_rng_stream_deterministic():
    a = ad.RngStream(42).normal(3, 3)
    b = ad.RngStream(42).normal(3, 3)
    assert np.array_equal(a, b)
    assert np.array_equal(ad.RngStream(1).permutation(10), ad.RngStream(1).permutation(10))


@settings(max_examples=50, deadline=None)
@given(
    x=arrays(
        np.float64,
        (3, 5),
        elements=st.floats(min_value=-30, max_value=30, allow_nan=False),
    ),
    shift=st.floats(min_value=-100, max_value=100, allow_nan=False),
)
def test_softmax_shift_invariance(x, shift):
    a = ad.softmax_rows(ad.Tensor(x)).data
    b = ad.softmax_rows(ad.Tensor(x + shift)).data
    assert np.allclose(a, b, atol=1e-12)
    assert np.allclose(a.sum(axis=1), 1.0)

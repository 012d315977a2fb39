"""Autodiff core: frozen hand values, finite-difference oracles, properties.

Every gradient assertion here is checked against central finite
differences computed in float64 by an independent loop (see
conftest.central_diff); nothing is compared against the library's own
backward pass twice.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ablenerf import diffcore as dc
from ablenerf.diffcore import Tensor
from ablenerf.errors import ContractError, InvariantError, ShapeError
from conftest import central_diff, rel_err


def _t(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _check_grads(build, tensors, n_probe=4, tol=5e-6, seed=0):
    """Compare backward() against central differences at sampled entries."""
    for t in tensors:
        t.grad = None  # backward() accumulates; start from a clean slate
    out = build()
    dc.backward(out)
    rng = np.random.default_rng(seed)
    for t in tensors:
        assert t.grad is not None, "no gradient reached input"
        for _ in range(n_probe):
            idx = tuple(rng.integers(0, s) for s in t.shape)
            fd = central_diff(lambda: build().data, t, idx)
            assert rel_err(fd, t.grad[idx]) < tol, \
                f"grad mismatch at {idx}: fd={fd} an={t.grad[idx]}"


# ---------------------------------------------------------------------------
# elementwise and broadcasting


def test_add_mul_values():
    a = _t([[1.0, 2.0], [3.0, 4.0]])
    b = _t([10.0, 20.0])
    assert np.array_equal(dc.add(a, b).data, [[11, 22], [13, 24]])
    assert np.array_equal(dc.mul(a, b).data, [[10, 40], [30, 80]])
    assert np.array_equal(dc.sub(a, 1.0).data, [[0, 1], [2, 3]])


def test_broadcast_grads_reduce_to_input_shape():
    a = _t(np.random.default_rng(0).standard_normal((3, 4)))
    b = _t(np.random.default_rng(1).standard_normal((4,)))
    out = dc.tsum(dc.mul(dc.add(a, b), dc.add(a, b)))
    dc.backward(out)
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    _check_grads(lambda: dc.tsum(dc.mul(dc.add(a, b), dc.add(a, b))), [a, b])


def test_shared_input_accumulates_both_paths():
    # y = x*x + x: dy/dx = 2x + 1.  Regression for the gradient-aliasing
    # bug where the first stored grad buffer was shared between parents.
    x = _t([3.0])
    y = dc.tsum(dc.add(dc.mul(x, x), x))
    dc.backward(y)
    assert np.allclose(x.grad, [7.0])


def test_repeated_backward_adds_exactly_one_contribution():
    x = _t([2.0])
    y = dc.tsum(dc.mul(x, x))
    dc.backward(y)
    first = x.grad.copy()
    dc.backward(y)
    assert np.allclose(x.grad, 2 * first)


def test_relu_exp_log_values_and_grads():
    x = _t([-2.0, -0.5, 0.5, 2.0])
    assert np.array_equal(dc.relu(x).data, [0, 0, 0.5, 2.0])
    p = _t([0.25, 1.0, 4.0])
    assert np.allclose(dc.log(dc.exp(p)).data, p.data)
    _check_grads(lambda: dc.tsum(dc.exp(x)), [x])
    _check_grads(lambda: dc.tsum(dc.log(p)), [p])


def test_relu_subgradient_zero_on_negative_side():
    x = _t([-1.0, 2.0])
    dc.backward(dc.tsum(dc.relu(x)))
    assert np.array_equal(x.grad, [0.0, 1.0])


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def test_sum_mean_axes():
    x = _t(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
    assert np.array_equal(dc.tsum(x, axis=1).data, x.data.sum(axis=1))
    assert np.array_equal(dc.tmean(x, axis=(0, 2)).data, x.data.mean(axis=(0, 2)))
    assert dc.tsum(x, axis=2, keepdims=True).shape == (2, 3, 1)
    _check_grads(lambda: dc.tsum(dc.mul(dc.tmean(x, axis=1), 3.0)), [x])


def test_reshape_swapaxes_roundtrip_grads():
    x = _t(np.random.default_rng(2).standard_normal((2, 3, 4)))

    def build():
        y = dc.swapaxes(dc.reshape(x, (6, 4)), 0, 1)
        return dc.tsum(dc.mul(y, y))

    _check_grads(build, [x])


def test_concat_and_slice_scatter():
    a = _t([[1.0, 2.0]])
    b = _t([[3.0, 4.0], [5.0, 6.0]])
    y = dc.concat([a, b], axis=0)
    assert np.array_equal(y.data, [[1, 2], [3, 4], [5, 6]])
    z = dc.tsum(dc.tslice(y, (slice(1, 3), slice(None))))
    dc.backward(z)
    assert np.array_equal(a.grad, [[0.0, 0.0]])
    assert np.array_equal(b.grad, [[1.0, 1.0], [1.0, 1.0]])


def test_broadcast_to_sums_over_new_axes():
    x = _t([1.0, 2.0])
    y = dc.broadcast_to(dc.reshape(x, (1, 2)), (3, 2))
    dc.backward(dc.tsum(y))
    assert np.array_equal(x.grad, [3.0, 3.0])


# ---------------------------------------------------------------------------
# matmul / affine


def test_matmul_matches_numpy_batched():
    rng = np.random.default_rng(3)
    a = _t(rng.standard_normal((2, 5, 3, 4)))
    b = _t(rng.standard_normal((2, 5, 4, 6)))
    assert np.allclose(dc.matmul(a, b).data, a.data @ b.data)
    _check_grads(lambda: dc.tsum(dc.mul(dc.matmul(a, b), 0.1)), [a, b],
                 n_probe=3)


def test_matmul_shape_errors():
    a = _t(np.ones((3,)))
    b = _t(np.ones((3, 4)))
    with pytest.raises(ShapeError):
        dc.matmul(a, b)
    with pytest.raises(ShapeError):
        dc.matmul(_t(np.ones((2, 3))), _t(np.ones((4, 2))))


def test_affine_value_and_grads():
    rng = np.random.default_rng(4)
    x = _t(rng.standard_normal((5, 2, 3)))
    w = _t(rng.standard_normal((3, 4)))
    b = _t(rng.standard_normal(4))
    y = dc.affine(x, w, b)
    assert np.allclose(y.data, x.data @ w.data + b.data)
    _check_grads(lambda: dc.tsum(dc.mul(dc.affine(x, w, b),
                                        dc.affine(x, w, b))), [x, w, b],
                 n_probe=3)


def test_affine_bias_shape_error():
    with pytest.raises(ShapeError):
        dc.affine(_t(np.ones((2, 3))), _t(np.ones((3, 4))), _t(np.ones(3)))


# ---------------------------------------------------------------------------
# masked softmax


def test_softmax_masked_hand_value():
    # scores [ln1, ln2, ln3] with the last entry masked: exp -> [1, 2, -],
    # normalized over allowed entries -> [1/3, 2/3, 0]
    s = _t([np.log(1.0), np.log(2.0), np.log(3.0)])
    out = dc.softmax_masked(s, np.array([True, True, False]))
    assert np.allclose(out.data, [1 / 3, 2 / 3, 0.0], atol=1e-12)


def test_softmax_masked_zero_grad_at_masked_entries():
    s = _t([[0.3, -0.2, 1.4]])
    mask = np.array([[True, False, True]])
    out = dc.softmax_masked(s, mask)
    assert out.data[0, 1] == 0.0
    dc.backward(dc.tsum(dc.mul(out, _t([[1.0, 5.0, 2.0]], grad=False))))
    assert s.grad[0, 1] == 0.0
    fd = central_diff(
        lambda: (dc.softmax_masked(s, mask).data * [[1.0, 5.0, 2.0]]).sum(),
        s, (0, 2))
    assert rel_err(fd, s.grad[0, 2]) < 1e-6


def test_softmax_shift_invariance_and_row_sums():
    rng = np.random.default_rng(5)
    s = rng.standard_normal((4, 6)) * 3
    mask = rng.random((4, 6)) > 0.3
    mask[:, 0] = True
    a = dc.softmax_masked(_t(s), mask).data
    b = dc.softmax_masked(_t(s + 1000.0), mask).data
    assert np.allclose(a, b, atol=1e-12)
    assert np.allclose(a.sum(-1), 1.0, atol=1e-6)


def test_softmax_all_masked_row_raises():
    with pytest.raises(InvariantError):
        dc.softmax_masked(_t([[1.0, 2.0]]), np.array([[False, False]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 7), st.integers(0, 10 ** 6))
def test_softmax_rows_are_distributions(rows, cols, seed):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((rows, cols)) * 5
    mask = rng.random((rows, cols)) > 0.4
    mask[:, -1] = True
    out = dc.softmax_masked(_t(scores), mask).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(-1), 1.0, atol=1e-6)
    assert np.all(out[~mask] == 0.0)


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_hand_value():
    # row [1, 3]: mean 2, variance 1 -> xhat [-1, 1] / sqrt(1 + eps)
    x = _t([[1.0, 3.0]])
    g = _t([1.0, 1.0])
    b = _t([0.0, 0.0])
    out = dc.layer_norm(x, g, b)
    expect = np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-5)
    assert np.allclose(out.data, [expect], atol=1e-12)


def test_layer_norm_gain_shift():
    x = _t([[2.0, 4.0, 6.0]])
    out = dc.layer_norm(x, _t([2.0, 2.0, 2.0]), _t([1.0, 1.0, 1.0]))
    centered = (x.data - 4.0) / np.sqrt((8.0 / 3.0) + 1e-5)
    assert np.allclose(out.data, 2.0 * centered + 1.0)


def test_layer_norm_grads_match_fd():
    rng = np.random.default_rng(6)
    x = _t(rng.standard_normal((3, 5)))
    g = _t(rng.standard_normal(5))
    b = _t(rng.standard_normal(5))
    w = dc.constant(rng.standard_normal((3, 5)))

    def build():
        return dc.tsum(dc.mul(dc.layer_norm(x, g, b), w))

    _check_grads(build, [x, g, b])


def test_layer_norm_rejects_width_one():
    with pytest.raises(ContractError):
        dc.layer_norm(_t([[1.0]]), _t([1.0]), _t([0.0]))


# ---------------------------------------------------------------------------
# composed helpers


def test_softplus_matches_reference_and_is_stable():
    x = _t([-800.0, -5.0, 0.0, 5.0, 800.0])
    out = dc.softplus(x).data
    ref = np.logaddexp(0.0, x.data)
    assert np.allclose(out, ref, atol=1e-12)
    assert np.all(np.isfinite(out))


def test_softplus_grad_is_sigmoid():
    x = _t([-2.0, 0.5, 3.0])
    dc.backward(dc.tsum(dc.softplus(x)))
    assert np.allclose(x.grad, 1.0 / (1.0 + np.exp(-x.data)), atol=1e-9)


def test_clamp01_values_and_outside_subgradient():
    x = _t([-0.5, 0.25, 0.75, 1.5])
    y = dc.clamp01(x)
    assert np.allclose(y.data, [0.0, 0.25, 0.75, 1.0])
    dc.backward(dc.tsum(y))
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# graph mechanics


def test_backward_requires_scalar():
    x = _t([[1.0, 2.0]])
    with pytest.raises(ContractError):
        dc.backward(dc.mul(x, 2.0))


def test_no_grad_builds_no_graph():
    x = _t([1.0, 2.0])
    with dc.no_grad():
        y = dc.mul(x, x)
    assert y._parents == ()
    assert not y.requires_grad


def test_constants_get_no_grad():
    x = _t([1.0, 2.0])
    c = dc.constant([3.0, 4.0])
    dc.backward(dc.tsum(dc.mul(x, c)))
    assert c.grad is None
    assert np.array_equal(x.grad, [3.0, 4.0])


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_finiteness_checks_catch_overflow():
    dc.set_finiteness_checks(True)
    try:
        with pytest.raises(InvariantError):
            dc.exp(_t([1000.0]))
    finally:
        dc.set_finiteness_checks(False)


def test_zero_grads_clears():
    x = _t([1.0])
    dc.backward(dc.tsum(dc.mul(x, x)))
    assert x.grad is not None
    dc.zero_grads([x])
    assert x.grad is None


def test_operator_sugar_matches_functions():
    a = _t([2.0, 3.0])
    b = _t([4.0, 5.0])
    assert np.array_equal((a + b).data, dc.add(a, b).data)
    assert np.array_equal((a - b).data, dc.sub(a, b).data)
    assert np.array_equal((a * b).data, dc.mul(a, b).data)
    assert np.array_equal((-a).data, [-2.0, -3.0])
    m = _t(np.ones((2, 2)))
    assert np.array_equal((m @ m).data, 2 * np.ones((2, 2)))

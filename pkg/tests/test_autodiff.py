import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ims import autodiff as ad
from ims.autodiff import Tensor
from ims.errors import ShapeError, TapeError

from gradcheck import REL_TOL, check, weighted_sum

rng = np.random.default_rng(1234)


def t64(shape, low=None, high=None, seed=0):
    r = np.random.default_rng(seed)
    data = r.uniform(low, high, size=shape) if low is not None else r.normal(size=shape)
    return Tensor(data.astype(np.float64), requires_grad=True)


# ---------------------------------------------------------------- gradient suite (64-bit)

def test_grad_add_same_shape():
    a, b = t64((4, 5), seed=1), t64((4, 5), seed=2)
    assert check(lambda: weighted_sum(ad.add(a, b)), [a, b]) < REL_TOL


def test_grad_add_channel_and_scalar_broadcast():
    x, c, s = t64((3, 4, 2, 2), seed=1), t64((4,), seed=2), t64((1,), seed=3)
    assert check(lambda: weighted_sum(ad.add(ad.add(x, c), s)), [x, c, s]) < REL_TOL


def test_grad_mul():
    a, b = t64((6, 7), seed=4), t64((6, 7), seed=5)
    assert check(lambda: weighted_sum(ad.mul(a, b)), [a, b]) < REL_TOL


def test_grad_mul_channel_vector():
    x, m = t64((2, 5, 3, 3), seed=6), t64((5,), seed=7)
    assert check(lambda: weighted_sum(ad.mul(x, m)), [x, m]) < REL_TOL


def test_grad_sub_and_neg():
    a, b = t64((5, 5), seed=8), t64((5, 5), seed=9)
    assert check(lambda: weighted_sum(ad.sub(a, ad.neg(b))), [a, b]) < REL_TOL


def test_grad_matmul():
    a, b = t64((7, 5), seed=10), t64((5, 6), seed=11)
    assert check(lambda: weighted_sum(ad.matmul(a, b)), [a, b]) < REL_TOL


def test_grad_relu():
    # keep entries away from the kink at zero
    data = np.random.default_rng(12).normal(size=(8, 16))
    data += np.sign(data) * 0.05
    a = Tensor(data, requires_grad=True)
    assert check(lambda: weighted_sum(ad.relu(a)), [a]) < REL_TOL


def test_grad_sigmoid():
    a = t64((10, 12), seed=13)
    assert check(lambda: weighted_sum(ad.sigmoid(ad.mul(a, 3.0))), [a]) < REL_TOL


def test_grad_softmax():
    a = t64((9, 6), seed=14)
    assert check(lambda: weighted_sum(ad.softmax(a, axis=1)), [a]) < REL_TOL


def test_grad_log_softmax():
    a = t64((9, 6), seed=15)
    assert check(lambda: weighted_sum(ad.log_softmax(a, axis=1)), [a]) < REL_TOL


def test_grad_log():
    a = t64((10, 10), low=0.2, high=3.0, seed=16)
    assert check(lambda: weighted_sum(ad.log(a)), [a]) < REL_TOL


def test_grad_sum_and_mean_axes():
    a = t64((5, 6, 4), seed=17)
    assert check(lambda: weighted_sum(ad.sum(a, axis=1)), [a]) < REL_TOL
    assert check(lambda: weighted_sum(ad.mean(a, axis=2)), [a]) < REL_TOL
    assert check(lambda: ad.mean(ad.mul(a, a)), [a]) < REL_TOL


def test_grad_clamp():
    data = np.random.default_rng(18).uniform(-2, 2, size=(12, 12))
    # avoid the two boundaries where the derivative jumps
    data[np.abs(np.abs(data) - 1.0) < 0.01] = 0.3
    a = Tensor(data, requires_grad=True)
    assert check(lambda: weighted_sum(ad.clamp(a, -1.0, 1.0)), [a]) < REL_TOL


def test_grad_channel_scale():
    x, m = t64((3, 6, 4, 4), seed=19), t64((6,), low=0, high=1, seed=20)
    assert check(lambda: weighted_sum(ad.channel_scale(x, m)), [x, m]) < REL_TOL


def test_grad_max_pool():
    # distinct values so each window has a unique maximum
    data = np.random.default_rng(21).permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) / 10.0
    a = Tensor(data.astype(np.float64), requires_grad=True)
    assert check(lambda: weighted_sum(ad.max_pool(a, 2)), [a]) < REL_TOL


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_grad_conv2d(padding):
    x, w, b = t64((2, 3, 7, 7), seed=22), t64((4, 3, 3, 3), seed=23), t64((4,), seed=24)
    assert check(lambda: weighted_sum(ad.conv2d(x, w, b, padding=padding)), [x, w, b]) < REL_TOL


def test_grad_conv2d_rectangular_kernel_no_bias():
    x, w = t64((2, 2, 6, 5), seed=25), t64((3, 2, 1, 3), seed=26)
    assert check(lambda: weighted_sum(ad.conv2d(x, w, None, padding="same")), [x, w]) < REL_TOL


def test_grad_reshape():
    a = t64((4, 6), seed=27)
    assert check(lambda: weighted_sum(ad.reshape(a, (3, 8))), [a]) < REL_TOL


def test_grad_composite_two_layer_agreement():
    from ims.optimize import loss_agree

    x = Tensor(np.random.default_rng(28).normal(size=(5, 4)))
    w1, w2 = t64((4, 6), seed=29), t64((6, 3), seed=30)
    q = Tensor(np.full((5, 3), 1 / 3))

    def fn():
        return loss_agree(ad.softmax(ad.matmul(ad.relu(ad.matmul(x, w1)), w2), axis=1), q)

    assert check(fn, [w1, w2]) < REL_TOL


# ---------------------------------------------------------------- forward values

def test_conv2d_matches_direct_loop():
    r = np.random.default_rng(31)
    x = r.normal(size=(2, 3, 5, 6))
    w = r.normal(size=(4, 3, 3, 3))
    b = r.normal(size=4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 6))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(6):
                    ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_max_pool_ties_route_to_first():
    x = Tensor(np.array([[[[1.0, 1.0], [1.0, 0.0]]]]), requires_grad=True)
    ad.backward(ad.sum(ad.max_pool(x, 2)))
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_sigmoid_extreme_inputs_are_finite():
    out = ad.sigmoid(Tensor(np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0])))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == 0.0 and out.data[-1] == 1.0 and out.data[2] == 0.5


def test_sigmoid_of_ten_matches_high_precision():
    import mpmath

    expected = float(1 / (1 + mpmath.exp(-10)))
    assert ad.sigmoid(Tensor(np.array([10.0]))).data[0] == pytest.approx(expected, rel=1e-15)


def test_softmax_stable_for_large_logits():
    out = ad.softmax(Tensor(np.array([[1000.0, 1000.0, -1000.0]])), axis=1)
    np.testing.assert_allclose(out.data, [[0.5, 0.5, 0.0]])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(arr):
    out = ad.softmax(Tensor(arr), axis=1)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out.data >= 0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
       st.floats(-5, 0), st.floats(0, 5))
def test_clamp_stays_in_bounds(arr, lo, hi):
    out = ad.clamp(Tensor(arr), lo, hi)
    assert out.data.min() >= lo and out.data.max() <= hi


def test_default_dtype_is_float32_and_respects_context():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with ad.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor(np.zeros(2, np.float64)).dtype == np.float64


# ---------------------------------------------------------------- tape semantics

def test_backward_accumulates_across_reuse():
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    ad.backward(ad.sum(ad.mul(a, a)))
    np.testing.assert_allclose(a.grad, [4.0, 6.0])


def test_backward_twice_on_same_graph_raises():
    a = Tensor(np.array([1.0]), requires_grad=True)
    out = ad.sum(ad.mul(a, 2.0))
    ad.backward(out)
    with pytest.raises(TapeError):
        ad.backward(out)


def test_backward_requires_scalar_root():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(a, 2.0))


def test_backward_on_detached_root_raises():
    with pytest.raises(TapeError):
        ad.backward(ad.sum(Tensor(np.ones(3))))


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.sum(ad.mul(a, 2.0))
    assert out.node is None and not out.requires_grad


def test_nodes_replay_in_reverse_recording_order():
    a = Tensor(np.array([1.5]), requires_grad=True)
    b = ad.mul(a, 2.0)
    c = ad.add(b, a)
    d = ad.sum(ad.mul(c, b))
    assert b.node.seq < c.node.seq < d.node.seq
    ad.backward(d)
    # d = (3a) * (2a) = 6a^2
    np.testing.assert_allclose(a.grad, [12 * 1.5])
    assert b.node.consumed and c.node.consumed


def test_leaf_root_gets_unit_gradient():
    a = Tensor(np.array(3.0), requires_grad=True)
    ad.backward(a)
    assert a.grad == 1.0


def test_gradients_skip_constant_inputs():
    a = Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.ones(2))
    ad.backward(ad.sum(ad.mul(a, c)))
    assert c.grad is None


# ---------------------------------------------------------------- shape errors

def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((3, 1, 3, 3))))
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((3, 1, 2, 2))), padding="same")
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((3, 1, 3, 3))), padding="full")


def test_max_pool_requires_divisible_size():
    with pytest.raises(ShapeError):
        ad.max_pool(Tensor(np.ones((1, 1, 5, 4))), 2)


def test_channel_scale_length_mismatch():
    with pytest.raises(ShapeError):
        ad.channel_scale(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(4)))


def test_clamp_reversed_bounds():
    with pytest.raises(ValueError):
        ad.clamp(Tensor(np.ones(2)), 1.0, 0.0)

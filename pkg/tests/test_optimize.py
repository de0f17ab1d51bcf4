import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ims import autodiff as ad
from ims.autodiff import Tensor
from ims.errors import PoisonedGradientError, ShapeError
from ims.optimize import AdamW, clip_params, inner_product, l1_penalty, loss_agree, loss_disagree

from gradcheck import REL_TOL, check

C = 10


def onehot(i, c=C):
    v = np.zeros((1, c))
    v[0, i] = 1.0
    return Tensor(v)


def uniform(c=C):
    return Tensor(np.full((1, c), 1.0 / c))


def probs(draw_logits):
    e = np.exp(draw_logits - draw_logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_agree_examples():
    assert abs(float(loss_agree(onehot(3), onehot(3)).data)) <= 1e-6
    assert float(loss_agree(uniform(), uniform()).data) == pytest.approx(-math.log(0.1), abs=1e-5)
    assert float(loss_agree(onehot(1), onehot(2)).data) == pytest.approx(-math.log(1e-7), abs=1e-3)


def test_disagree_examples():
    assert abs(float(loss_disagree(onehot(1), onehot(2)).data)) <= 1e-6
    assert float(loss_disagree(onehot(4), onehot(4)).data) == pytest.approx(16.1181, abs=1e-3)
    assert float(loss_disagree(uniform(), uniform()).data) == pytest.approx(-math.log(0.9), abs=1e-5)


def test_batch_mean_reduction():
    q = Tensor(np.vstack([onehot(0).data, uniform().data]))
    want = (-math.log(1 - 1e-7) - math.log(0.1)) / 2
    assert float(loss_agree(q, q).data) == pytest.approx(want, abs=1e-6)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_agree(onehot(0, 3), onehot(0, 4))
    with pytest.raises(ShapeError):
        inner_product(Tensor(np.ones((2, 2, 2))), Tensor(np.ones((2, 2, 2))))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_losses_nonnegative_and_inner_product_bounded(seed, c):
    rng = np.random.default_rng(seed)
    q, q2 = (Tensor(probs(rng.normal(size=(4, c)) * 3)) for _ in range(2))
    ip = inner_product(q, q2).data
    assert np.all(ip >= 0) and np.all(ip <= 1 + 1e-12)
    total = float(loss_agree(q, q).data) + float(loss_disagree(q, q2).data)
    assert math.isfinite(total) and total >= 0


@pytest.mark.parametrize("loss", [loss_agree, loss_disagree])
def test_loss_gradients(loss):
    rng = np.random.default_rng(1)
    la = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    lb = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    fn = lambda: loss(ad.softmax(la), ad.softmax(lb))
    assert check(fn, [la, lb], n_coords=30) < REL_TOL


def test_l1_examples():
    s = [Tensor(np.full(4, 0.5), requires_grad=True)]
    assert float(l1_penalty(s, 10).data) == 5.0
    assert float(l1_penalty(s, 0).data) == 0.0
    ones = [Tensor(np.ones(3)), Tensor(np.ones(5))]
    assert float(l1_penalty(ones, 7.5).data) == pytest.approx(7.5)
    with pytest.raises(ValueError):
        l1_penalty(s, -1)
    with pytest.raises(ValueError):
        l1_penalty([], 1)


def test_l1_gradient():
    s = Tensor(np.array([0.2, 0.7, 0.4, 0.9]), requires_grad=True)
    ad.backward(l1_penalty([s], 10.0))
    np.testing.assert_allclose(s.grad, np.full(4, 2.5))


def test_clip_examples():
    assert clip_params(np.array(1.2), 0, 1) == 1.0
    assert clip_params(np.array(-0.3), 0, 1) == 0.0
    x = np.random.default_rng(0).random(100).astype(np.float32)
    assert clip_params(x, 0, 1).tobytes() == x.tobytes()
    with pytest.raises(ValueError):
        clip_params(x, 1, 0)
    t = Tensor(np.array([-2.0, 0.5, 2.0]))
    clip_params(t, -1, 1)
    np.testing.assert_array_equal(t.data, [-1.0, 0.5, 1.0])


def test_adamw_zero_gradient_leaves_params():
    t = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    opt = AdamW([("t", t)], lr=0.01)
    t.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(t.data, [0.3, -0.2])


def test_adamw_first_step_is_sign_of_gradient():
    lr = 0.01
    t = Tensor(np.zeros(5), requires_grad=True)
    opt = AdamW([("t", t)], lr=lr)
    g = np.array([3.0, -0.5, 1e-3, -20.0, 0.2])
    t.grad = g.copy()
    opt.step()
    step = -t.data
    assert np.all(np.sign(step) == np.sign(g))
    assert np.all(np.abs(step) >= 0.99 * lr) and np.all(np.abs(step) <= lr)


def test_adamw_matches_hand_oracle():
    # scalar Adam with decoupled decay, written out term by term
    lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.1
    grads = [0.4, -1.2, 0.7, 0.0, 2.5]
    x, m, v = 1.5, 0.0, 0.0
    for i, g in enumerate(grads, start=1):
        x = x * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** i)) / (math.sqrt(v / (1 - b2 ** i)) + eps)
    t = Tensor(np.array([1.5]), requires_grad=True)
    opt = AdamW([("t", t)], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    for g in grads:
        opt.step({"t": np.array([g])})
    assert t.data[0] == pytest.approx(x, rel=1e-12)
    assert opt.state.step == len(grads)


def test_adamw_weight_decay_shrinks_monotonically():
    t = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    opt = AdamW([("t", t)], lr=0.1, weight_decay=0.5)
    prev = np.abs(t.data).copy()
    for _ in range(10):
        opt.step({"t": np.zeros(2)})
        cur = np.abs(t.data)
        assert np.all(cur < prev)
        prev = cur.copy()


def test_adamw_deterministic():
    def run():
        rng = np.random.default_rng(9)
        t = Tensor(rng.normal(size=20).astype(np.float32), requires_grad=True)
        opt = AdamW([("t", t)], lr=0.01)
        for _ in range(30):
            opt.step({"t": rng.normal(size=20).astype(np.float32)})
        return t.data.tobytes()

    assert run() == run()


def test_adamw_errors():
    t = Tensor(np.zeros(3), requires_grad=True)
    opt = AdamW([("delta", t)], lr=0.1)
    with pytest.raises(PoisonedGradientError, match="delta"):
        opt.step({"delta": np.array([0.0, np.nan, 1.0])})
    with pytest.raises(ShapeError):
        opt.step({"delta": np.zeros(4)})
    with pytest.raises(ValueError):
        AdamW([("t", t)], lr=0)
    np.testing.assert_array_equal(t.data, 0.0)
    assert opt.state.step == 0

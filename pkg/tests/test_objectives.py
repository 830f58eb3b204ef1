import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artnet.objectives import (
    AdamW, LossConfig, NonFiniteGradient, masked_ce_loss, sample_negatives, total_loss,
    visual_triplet_loss,
)
from artnet.tensor import Tensor, backward, finite_difference_check


def test_cross_entropy_examples():
    assert masked_ce_loss(Tensor(np.zeros((2, 7))), np.array([3, 5])).item() == pytest.approx(math.log(7), rel=1e-14)
    oracle = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    got = masked_ce_loss(Tensor([[1.0, 2.0, 3.0]]), np.array([2])).item()
    assert got == pytest.approx(oracle, rel=1e-14)
    assert round(got, 5) == 0.40761
    assert masked_ce_loss(Tensor([[0.0, 800.0]]), np.array([1])).item() == 0.0


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(ValueError):
        masked_ce_loss(Tensor(np.zeros((1, 3))), np.array([3]))


def test_triplet_examples():
    a = np.array([[0.0, 0.0]])
    # positive distance 0, negative distance 1 > margin
    assert visual_triplet_loss(Tensor(a), a, np.array([[[1.0, 0.0]]]), margin=0.2).item() == 0.0
    # equal distances leave exactly the margin
    loss = visual_triplet_loss(Tensor(a), np.array([[3.0, 4.0]]), np.array([[[0.0, 5.0]]]), margin=0.2)
    assert loss.item() == pytest.approx(0.2, abs=1e-15)


def test_triplet_gradient_away_from_the_kink():
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(4, 3))
    neg = rng.normal(size=(4, 5, 3))
    anchor = pos + 0.3 * rng.normal(size=(4, 3))
    assert finite_difference_check(lambda t: visual_triplet_loss(t, pos, neg, margin=1.0), anchor) <= 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 2))
def test_triplet_is_non_negative_and_order_free(seed, margin):
    rng = np.random.default_rng(seed)
    a, p, n = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 6, 4))
    loss = visual_triplet_loss(Tensor(a), p, n, margin).item()
    assert loss >= 0
    shuffled = n[:, rng.permutation(6)]
    assert visual_triplet_loss(Tensor(a), p, shuffled, margin).item() == pytest.approx(loss, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_cross_entropy_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 6)) * 10
    assert masked_ce_loss(Tensor(logits), rng.integers(0, 6, size=4)).item() >= 0


def test_negatives_never_include_the_anchor_row():
    targets = np.arange(5, dtype=float)[:, None] * np.ones((5, 3))
    neg = sample_negatives(targets, 8, np.random.default_rng(0))
    assert neg.shape == (5, 8, 3)
    for i in range(5):
        assert not np.any(neg[i, :, 0] == i)
    with pytest.raises(ValueError):
        sample_negatives(targets[:1], 2, np.random.default_rng(0))


def test_total_loss_examples():
    assert total_loss(Tensor(2.0), Tensor(3.0), 1.0).item() == 5.0
    assert total_loss(Tensor(2.0), Tensor(3.0), 0.0).item() == 2.0
    t = Tensor(1.5)
    assert total_loss(t, None, 1.0) is t


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)
    with pytest.raises(ValueError):
        LossConfig(margin=-0.1)


def test_adamw_zero_gradient_zero_decay_is_identity():
    w = Tensor(np.array([0.3, -2.0]), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
    for _ in range(5):
        w.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(w.data, [0.3, -2.0])


def test_adamw_minimises_a_quadratic():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"w": w}, lr=1e-2)
    for _ in range(2000):
        opt.zero_grad()
        backward((w * w).sum())
        opt.step()
    assert abs(w.item()) < 1e-3


def test_adamw_decay_is_decoupled_and_exact():
    lr, decay = 1e-2, 0.1
    w = Tensor(np.array([2.0, -0.5]), requires_grad=True)
    opt = AdamW({"w": w}, lr=lr, weight_decay=decay)
    expected = w.data.copy()
    for _ in range(10):
        w.grad = np.zeros(2)
        opt.step()
        expected = expected - lr * decay * expected
        np.testing.assert_array_equal(w.data, expected)


def test_adamw_defaults():
    opt = AdamW({})
    assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (3e-5, 0.9, 0.999, 1e-4)


def test_adamw_rejects_non_finite_gradient():
    w = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = AdamW({"layer.w": w, "layer.b": b}, lr=0.1)
    w.grad = np.zeros(2)
    b.grad = np.array([0.0, np.nan])
    with pytest.raises(NonFiniteGradient, match="layer.b"):
        opt.step()
    np.testing.assert_array_equal(w.data, 1.0)
    assert opt.t == 0


def test_adamw_state_matches_shapes():
    w = Tensor(np.ones((2, 3)), requires_grad=True)
    opt = AdamW({"w": w})
    state = opt.state_dict()
    assert state["m"]["w"].shape == (2, 3) and state["v"]["w"].shape == (2, 3)

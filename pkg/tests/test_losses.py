import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mono3d.gradcheck import grad_check
from mono3d.losses import (IOU_FLOOR, LossConfig, loss_2d, loss_3d, loss_cls, mine_hard,
                           per_sample_ce, smooth_l1, total_loss)
from mono3d.tensor import Tensor


def naive_ce(logits, targets):
    """Direct -log softmax probability, no stabilization tricks."""
    out = []
    for row, t in zip(logits, targets):
        p = np.exp(row) / np.exp(row).sum()
        out.append(-math.log(p[t]))
    return np.mean(out)


class TestLossCls:
    def test_uniform_logits(self):
        logits = np.zeros((3, 4))
        assert loss_cls(logits, [0, 1, 2]).item() == pytest.approx(math.log(4.0), abs=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(scale=3.0, size=(8, 5))
        targets = rng.integers(0, 5, size=8)
        got = loss_cls(logits, targets).item()
        assert got == pytest.approx(naive_ce(logits, targets), abs=1e-12)

    def test_stable_for_huge_logits(self):
        logits = np.array([[1000.0, 0.0], [0.0, 1000.0]])
        val = loss_cls(logits, [0, 1]).item()
        assert np.isfinite(val) and val == pytest.approx(0.0, abs=1e-12)

    def test_per_sample_agrees(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 3))
        targets = rng.integers(0, 3, size=6)
        per = per_sample_ce(logits, targets)
        assert per.mean() == pytest.approx(loss_cls(logits, targets).item(), abs=1e-12)

    def test_target_shape_mismatch(self):
        with pytest.raises(ValueError, match="targets"):
            loss_cls(np.zeros((3, 2)), [0, 1])

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        targets = rng.integers(0, 4, size=5)
        r = grad_check(lambda a: loss_cls(a, targets), [logits], name="ce")
        assert r.passed, str(r)


class TestLoss2d:
    def test_perfect_boxes(self):
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        assert loss_2d(gt.copy(), gt).item() == pytest.approx(0.0, abs=1e-12)

    def test_half_width_overlap(self):
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        pred = np.array([[5.0, 0.0, 15.0, 10.0]])
        assert loss_2d(pred, gt).item() == pytest.approx(-math.log(1.0 / 3.0), abs=1e-12)

    def test_disjoint_is_floor_clamped(self):
        gt = np.array([[0.0, 0.0, 1.0, 1.0]])
        pred = np.array([[50.0, 50.0, 51.0, 51.0]])
        assert loss_2d(pred, gt).item() == pytest.approx(-math.log(IOU_FLOOR), abs=1e-9)

    def test_mean_over_rows(self):
        gt = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 4.0, 4.0]])
        pred = np.array([[0.0, 0.0, 10.0, 10.0], [2.0, 0.0, 6.0, 4.0]])
        half = -math.log(8.0 / 24.0)
        assert loss_2d(pred, gt).item() == pytest.approx(half / 2.0, abs=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        gt = np.array([[0.0, 0.0, 12.0, 9.0], [4.0, 4.0, 20.0, 16.0]])
        pred = Tensor(gt + rng.uniform(-1.0, 1.0, size=gt.shape), requires_grad=True)
        r = grad_check(lambda a: loss_2d(a, gt), [pred], name="neglog_iou")
        assert r.passed, str(r)


class TestSmoothL1:
    def test_quadratic_branch(self):
        assert smooth_l1(Tensor(0.5)).item() == pytest.approx(0.125, abs=1e-12)

    def test_linear_branch(self):
        assert smooth_l1(Tensor(2.0)).item() == pytest.approx(1.5, abs=1e-12)
        assert smooth_l1(Tensor(-3.0)).item() == pytest.approx(2.5, abs=1e-12)

    @given(st.floats(-5.0, 5.0))
    @settings(max_examples=40, deadline=None)
    def test_even_and_nonnegative(self, x):
        v = smooth_l1(Tensor(x)).item()
        assert v >= 0.0
        assert smooth_l1(Tensor(-x)).item() == pytest.approx(v, abs=1e-12)

    def test_continuous_at_knee(self):
        below = smooth_l1(Tensor(1.0 - 1e-9)).item()
        above = smooth_l1(Tensor(1.0 + 1e-9)).item()
        assert abs(above - below) < 1e-8
        assert smooth_l1(Tensor(1.0)).item() == pytest.approx(0.5, abs=1e-12)


class TestLoss3d:
    def test_sum_over_components_mean_over_rows(self):
        tgt = np.zeros((2, 7))
        pred = np.zeros((2, 7))
        pred[0, 0] = 0.5   # 0.125
        pred[1, 3] = 2.0   # 1.5
        assert loss_3d(pred, tgt).item() == pytest.approx((0.125 + 1.5) / 2.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            loss_3d(np.zeros((2, 7)), np.zeros((3, 7)))

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        tgt = rng.normal(size=(3, 7))
        pred = Tensor(tgt + rng.uniform(-2, 2, size=tgt.shape), requires_grad=True)
        r = grad_check(lambda a: loss_3d(a, tgt), [pred], name="smooth_l1_3d")
        assert r.passed, str(r)


class TestMineHard:
    def test_top_fraction(self):
        keep = mine_hard(np.array([3.0, 1.0, 2.0, 5.0, 4.0]), 0.2)
        np.testing.assert_array_equal(keep, [3])

    def test_ceil_budget(self):
        # ceil(0.2 * 6) = 2
        keep = mine_hard(np.arange(6.0), 0.2)
        np.testing.assert_array_equal(keep, [4, 5])

    def test_full_fraction_keeps_all(self):
        keep = mine_hard(np.array([0.5, 0.1, 0.9]), 1.0)
        np.testing.assert_array_equal(keep, [0, 1, 2])

    def test_ties_take_lower_index(self):
        keep = mine_hard(np.array([1.0, 1.0, 1.0, 1.0]), 0.25)
        np.testing.assert_array_equal(keep, [0])

    def test_protected_always_kept(self):
        losses = np.array([0.1, 9.0, 0.2, 8.0, 0.3])
        keep = mine_hard(losses, 0.25, protected=[0, 4])
        # budget ceil(0.25 * 3) = 1 over the unprotected pool {1, 2, 3}
        np.testing.assert_array_equal(keep, [0, 1, 4])

    def test_permutation_equivariance(self):
        # with distinct losses the chosen set ignores storage order
        rng = np.random.default_rng(5)
        losses = rng.normal(size=20)
        perm = rng.permutation(20)
        keep = {int(i) for i in mine_hard(losses, 0.3)}
        keep_p = {int(perm[i]) for i in mine_hard(losses[perm], 0.3)}
        assert keep_p == keep

    def test_empty(self):
        assert mine_hard(np.array([]), 0.2).size == 0


class TestTotalLoss:
    def test_unit_weights(self):
        assert total_loss(1.0, 2.0, 3.0).item() == pytest.approx(6.0, abs=1e-12)

    def test_lambda_linearity(self):
        cfg = LossConfig(lambda_2d=0.5, lambda_3d=2.0)
        assert total_loss(1.0, 2.0, 3.0, cfg).item() == pytest.approx(1 + 1 + 6, abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="non-negative"):
            LossConfig(lambda_2d=-1.0)
        with pytest.raises(ValueError, match="fraction"):
            LossConfig(hard_fraction=0.0)

    def test_gradient_flows_through_all_terms(self):
        a = Tensor(1.0, requires_grad=True)
        b = Tensor(2.0, requires_grad=True)
        c = Tensor(3.0, requires_grad=True)
        total_loss(a, b, c, LossConfig(lambda_2d=0.5, lambda_3d=2.0)).backward()
        assert (a.grad, b.grad, c.grad) == (1.0, 0.5, 2.0)

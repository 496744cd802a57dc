"""Tests for the training objectives and their analytic gradients."""

import math

import numpy as np
import pytest

from pointcount.errors import (
    MassMismatchError,
    NonBinaryMaskError,
    NonNegativeViolationError,
    ProbsNotNormalizedError,
    ShapeMismatchError,
)
from pointcount.losses import (
    DEFAULT_GAMMA,
    DEFAULT_LAMBDA_C,
    DEFAULT_LAMBDA_OT,
    DEFAULT_LAMBDA_S,
    DEFAULT_LAMBDA_TV,
    DEFAULT_REG_EPS,
    EPS_C,
    LossResult,
    auxiliary_loss,
    composite_loss,
    distillation_loss,
    dm_loss,
    focal_seg_loss,
    global_density_loss,
    gradcheck,
    lp_loss,
    sinkhorn,
    softmax,
    softmax_vjp,
)

# gt = [1, 0], pred = [0.5, 0.5], gamma = 2: both class weights are 0.5,
# each pixel contributes 0.5 * 0.25 * ln 2 and the mean equals that.
FOCAL_HALF_HALF = 0.08664339756999316
# -(1 - 0.5)^2 * ln 0.5 for the level classifier.
GD_HALF_GAMMA2 = 0.17328679513998632


class TestLpLoss:
    def test_identical_maps(self):
        x = np.array([[0.3, 0.7], [1.1, 0.0]])
        res = lp_loss(x, x.copy(), p=1)
        assert res.value == 0.0
        assert (res.grad == 0.0).all()

    def test_l1_example(self):
        res = lp_loss(np.array([1.0, 3.0]), np.zeros(2), p=1)
        assert res.value == 2.0
        np.testing.assert_array_equal(res.grad, [0.5, 0.5])

    def test_l2_example(self):
        res = lp_loss(np.array([1.0, 3.0]), np.zeros(2), p=2)
        assert res.value == 5.0
        np.testing.assert_array_equal(res.grad, [1.0, 3.0])

    def test_l1_tie_subgradient_zero(self):
        res = lp_loss(np.array([1.0, 2.0]), np.array([1.0, 0.0]), p=1)
        assert res.grad[0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            lp_loss(np.zeros(2), np.zeros(3))

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            lp_loss(np.zeros(2), np.zeros(2), p=3)

    def test_mean_reduction(self):
        # Doubling the resolution with the same per-pixel error keeps
        # the value fixed.
        small = lp_loss(np.full((2, 2), 1.0), np.zeros((2, 2)), p=2)
        large = lp_loss(np.full((4, 4), 1.0), np.zeros((4, 4)), p=2)
        assert small.value == large.value == 1.0

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for p in (1, 2):
            res = lp_loss(rng.normal(size=10), rng.normal(size=10), p=p)
            assert res.value >= 0.0


class TestWrappers:
    def test_auxiliary_same_contract(self):
        pred = np.array([1.0, 3.0])
        res = auxiliary_loss(pred, np.zeros(2), p=2)
        assert res.value == 5.0

    def test_distillation_reduces_to_lp(self):
        rng = np.random.default_rng(1)
        pred, tgt = rng.normal(size=6), rng.normal(size=6)
        assert distillation_loss(pred, tgt, p=1).value == lp_loss(pred, tgt, p=1).value

    def test_distillation_zero_at_match(self):
        x = np.array([0.25, 0.75])
        assert distillation_loss(x, x.copy(), p=2).value == 0.0

    def test_distillation_example(self):
        res = distillation_loss(np.array([0.5]), np.array([0.25]), p=2)
        assert res.value == 0.0625


class TestFocalSegLoss:
    def test_matching_prediction_near_zero(self):
        gt = np.array([[1.0, 0.0], [0.0, 1.0]])
        res = focal_seg_loss(gt, gt, gamma=2.0)
        assert 0.0 <= res.value <= 10.0 * EPS_C

    def test_half_half_example(self):
        res = focal_seg_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), gamma=2.0)
        np.testing.assert_allclose(res.value, FOCAL_HALF_HALF, rtol=1e-12)

    def test_gamma_zero_is_weighted_bce(self):
        rng = np.random.default_rng(2)
        pred = rng.uniform(0.05, 0.95, size=(4, 4))
        gt = (rng.random((4, 4)) < 0.4).astype(float)
        if gt.sum() in (0, gt.size):
            gt[0, 0] = 1.0 - gt[0, 0]
        res = focal_seg_loss(pred, gt, gamma=0.0)
        n = gt.size
        alpha_fg = 1.0 - gt.sum() / n
        alpha_bg = 1.0 - (n - gt.sum()) / n
        bce = np.where(gt == 1.0, -alpha_fg * np.log(pred), -alpha_bg * np.log(1.0 - pred))
        np.testing.assert_allclose(res.value, bce.mean(), atol=1e-12)

    def test_rare_class_weighs_more(self):
        # One foreground pixel among 16: alpha_fg = 15/16 > alpha_bg.
        gt = np.zeros((4, 4))
        gt[1, 1] = 1.0
        miss_fg = focal_seg_loss(np.where(gt == 1.0, 0.3, 0.999999), gt, gamma=0.0)
        miss_bg = focal_seg_loss(np.where(gt == 1.0, 0.999999, 0.7), gt, gamma=0.0)
        assert miss_fg.value > miss_bg.value

    def test_non_binary_mask_rejected(self):
        with pytest.raises(NonBinaryMaskError):
            focal_seg_loss(np.array([0.5]), np.array([0.3]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            focal_seg_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        pred = rng.uniform(0.1, 0.9, size=(3, 3))
        gt = (rng.random((3, 3)) < 0.5).astype(float)
        gt[0, 0], gt[0, 1] = 1.0, 0.0
        report = gradcheck(lambda x: _focal_pair(x, gt), pred, rel_tol=1e-4)
        assert report.passed, report


def _focal_pair(x, gt):
    res = focal_seg_loss(x, gt, gamma=2.0)
    return res.value, res.grad


class TestGlobalDensityLoss:
    def test_confident_correct_near_zero(self):
        probs = np.full(9, EPS_C)
        probs[4] = 1.0 - probs.sum() + EPS_C
        res = global_density_loss(probs, 4, gamma=2.0)
        assert res.value < 1e-12

    def test_gamma_zero_cross_entropy(self):
        probs = np.array([0.5, 0.5])
        res = global_density_loss(probs, 0, gamma=0.0)
        np.testing.assert_allclose(res.value, math.log(2.0), rtol=1e-12)

    def test_gamma_two_example(self):
        probs = np.array([0.5, 0.5])
        res = global_density_loss(probs, 0, gamma=2.0)
        np.testing.assert_allclose(res.value, GD_HALF_GAMMA2, rtol=1e-12)

    def test_unnormalized_rejected(self):
        with pytest.raises(ProbsNotNormalizedError):
            global_density_loss(np.array([0.5, 0.6]), 0)

    def test_negative_rejected(self):
        with pytest.raises(ProbsNotNormalizedError):
            global_density_loss(np.array([1.2, -0.2]), 0)

    def test_gradient_through_softmax(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=9)

        def fn(z):
            probs = softmax(z)
            res = global_density_loss(probs, 3, gamma=2.0)
            return res.value, softmax_vjp(probs, res.grad)

        report = gradcheck(fn, logits, rel_tol=1e-4)
        assert report.passed, report


class TestSoftmax:
    def test_sums_to_one(self):
        probs = softmax(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(probs.sum(), 1.0, atol=1e-12)

    def test_stable_for_large_logits(self):
        probs = softmax(np.array([1000.0, 1000.0]))
        np.testing.assert_allclose(probs, [0.5, 0.5])

    def test_vjp_matches_jacobian(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=5)
        g = rng.normal(size=5)
        p = softmax(z)
        jac = np.diag(p) - np.outer(p, p)
        np.testing.assert_allclose(softmax_vjp(p, g), jac.T @ g, atol=1e-12)


class TestSinkhorn:
    def test_self_transport_cheap(self):
        # Identity coupling is optimal; entropic smoothing still leaves
        # the value far below the off-diagonal cost scale.
        a = np.array([0.25, 0.25, 0.25, 0.25])
        cost = np.abs(np.subtract.outer(np.arange(4.0), np.arange(4.0))) ** 2
        res = sinkhorn(a, a, cost, reg_eps=1e-3)
        assert res.converged
        assert res.value < 0.05

    def test_point_masses_squared_distance(self):
        # All mass at bin 0 and bin 3 with cost d^2: the plan is forced,
        # the value exact up to normalization slack.
        a = np.array([1.0, 0.0, 0.0, 0.0])
        b = np.array([0.0, 0.0, 0.0, 1.0])
        cost = np.abs(np.subtract.outer(np.arange(4.0), np.arange(4.0))) ** 2
        res = sinkhorn(a, b, cost, reg_eps=1e-3)
        np.testing.assert_allclose(res.value, 9.0, rtol=0.05)

    def test_two_bin_identity(self):
        a = np.array([0.5, 0.5])
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        res = sinkhorn(a, a, cost, reg_eps=1e-3)
        np.testing.assert_allclose(res.plan, 0.5 * np.eye(2), atol=1e-3)
        assert res.value < 1e-2

    def test_marginals_within_tol(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0.1, 1.0, size=8)
        b = rng.uniform(0.1, 1.0, size=8)
        cost = rng.uniform(0.0, 1.0, size=(8, 8))
        res = sinkhorn(a, b, cost, reg_eps=1e-2, tol=1e-6)
        assert res.converged
        a_n, b_n = a / a.sum(), b / b.sum()
        assert np.abs(res.plan.sum(axis=1) - a_n).sum() < 1e-6
        assert np.abs(res.plan.sum(axis=0) - b_n).sum() < 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(0.1, 1.0, size=6)
        b = rng.uniform(0.1, 1.0, size=5)
        cost = rng.uniform(0.0, 1.0, size=(6, 5))
        fwd = sinkhorn(a, b, cost, reg_eps=1e-2, tol=1e-9)
        bwd = sinkhorn(b, a, cost.T, reg_eps=1e-2, tol=1e-9)
        assert abs(fwd.value - bwd.value) < 1e-9

    def test_zero_weight_bins_excluded(self):
        a = np.array([0.5, 0.0, 0.5])
        b = np.array([0.25, 0.75, 0.0])
        cost = np.ones((3, 3))
        res = sinkhorn(a, b, cost, reg_eps=1e-2)
        assert (res.plan[1, :] == 0.0).all()
        assert (res.plan[:, 2] == 0.0).all()

    def test_negative_weight_rejected(self):
        with pytest.raises(NonNegativeViolationError):
            sinkhorn(np.array([-0.1, 1.1]), np.array([0.5, 0.5]), np.zeros((2, 2)), 1e-2)

    def test_zero_mass_rejected(self):
        with pytest.raises(MassMismatchError):
            sinkhorn(np.zeros(2), np.array([0.5, 0.5]), np.zeros((2, 2)), 1e-2)

    def test_plan_nonnegative(self):
        rng = np.random.default_rng(8)
        a = rng.uniform(0.0, 1.0, size=7)
        b = rng.uniform(0.0, 1.0, size=7)
        cost = rng.uniform(0.0, 2.0, size=(7, 7))
        res = sinkhorn(a, b, cost, reg_eps=5e-2)
        assert res.plan.min() >= 0.0

    def test_max_iter_zero_not_converged(self):
        a = np.array([0.3, 0.7])
        b = np.array([0.6, 0.4])
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        res = sinkhorn(a, b, cost, reg_eps=1e-2, max_iter=0)
        assert not res.converged
        assert res.iterations == 0

    def test_dual_is_gradient_of_regularized_value(self):
        # The source potential differentiates the entropy-regularized
        # objective (dual value), up to a constant shift; zero-sum
        # directions kill the constant. The bare <plan, cost> value has
        # an extra entropy-variation term, so it is not the functional
        # being differentiated.
        rng = np.random.default_rng(9)
        a = rng.uniform(0.2, 1.0, size=5)
        a /= a.sum()
        b = rng.uniform(0.2, 1.0, size=5)
        b /= b.sum()
        cost = rng.uniform(0.0, 1.0, size=(5, 5))
        eps = 5e-2

        def reg_value(weights):
            res = sinkhorn(weights, b, cost, reg_eps=eps, tol=1e-12, max_iter=5000)
            return (
                float(np.dot(res.dual_u, weights))
                + float(np.dot(res.dual_v, b))
                - eps * float(res.plan.sum())
            )

        res = sinkhorn(a, b, cost, reg_eps=eps, tol=1e-12, max_iter=5000)
        direction = rng.normal(size=5)
        direction -= direction.mean()
        h = 1e-6
        numeric = (reg_value(a + h * direction) - reg_value(a - h * direction)) / (2 * h)
        analytic = float(np.dot(res.dual_u, direction))
        np.testing.assert_allclose(numeric, analytic, rtol=1e-4, atol=1e-8)


class TestDmLoss:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(10)
        target = rng.uniform(0.0, 1.0, size=(6, 6))
        res = dm_loss(target, target.copy(), target.copy())
        assert res.parts["count"] == 0.0
        assert res.parts["tv"] == 0.0
        # Only the entropic bias of the OT term remains.
        assert res.value == DEFAULT_LAMBDA_OT * res.parts["ot"]
        assert res.parts["ot"] < 0.05

    def test_count_term(self):
        pred = np.full((2, 2), 0.75)  # mass 3
        target = np.full((2, 2), 1.25)  # mass 5
        res = dm_loss(pred, target, target.copy())
        assert res.parts["count"] == 2.0

    def test_zero_mass_prediction_degenerate(self):
        target = np.full((3, 3), 1.0)
        res = dm_loss(np.zeros((3, 3)), target, target.copy())
        assert res.degenerate
        assert res.value == res.parts["count"] == 9.0
        assert res.parts["ot"] == 0.0 and res.parts["tv"] == 0.0

    def test_negative_map_rejected(self):
        with pytest.raises(NonNegativeViolationError):
            dm_loss(np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]))

    def test_default_weights(self):
        assert DEFAULT_LAMBDA_OT == 0.1
        assert DEFAULT_LAMBDA_TV == 0.01
        assert DEFAULT_REG_EPS == 1e-2

    def test_tv_term_uses_distilled(self):
        rng = np.random.default_rng(11)
        pred = rng.uniform(0.1, 1.0, size=(4, 4))
        target = rng.uniform(0.1, 1.0, size=(4, 4))
        distilled = rng.uniform(0.1, 1.0, size=(4, 4))
        res = dm_loss(pred, target, distilled)
        mu = pred / pred.sum()
        eta = distilled / distilled.sum()
        np.testing.assert_allclose(res.parts["tv"], 0.5 * np.abs(mu - eta).sum(), rtol=1e-12)

    def test_value_is_weighted_sum_of_parts(self):
        rng = np.random.default_rng(12)
        pred = rng.uniform(0.1, 1.0, size=(4, 4))
        target = rng.uniform(0.1, 1.0, size=(4, 4))
        res = dm_loss(pred, target, target.copy())
        expected = (
            res.parts["count"]
            + DEFAULT_LAMBDA_OT * res.parts["ot"]
            + DEFAULT_LAMBDA_TV * res.parts["tv"]
        )
        np.testing.assert_allclose(res.value, expected, rtol=1e-12)


class TestCompositeLoss:
    def _mk(self, value, size=3):
        return LossResult(value, np.full(size, value))

    def test_zero_weights_is_distillation(self):
        total = composite_loss(self._mk(1.3), self._mk(0.4), self._mk(0.9), lambda_s=0.0, lambda_c=0.0)
        assert total.value == 1.3
        assert (total.grad_seg == 0.0).all()
        assert (total.grad_gd == 0.0).all()

    def test_all_zero(self):
        total = composite_loss(self._mk(0.0), self._mk(0.0), self._mk(0.0))
        assert total.value == 0.0

    def test_worked_example(self):
        total = composite_loss(self._mk(1.0), self._mk(0.5), self._mk(0.2))
        np.testing.assert_allclose(total.value, 1.052, rtol=1e-12)

    def test_default_weights(self):
        assert DEFAULT_LAMBDA_S == 0.1
        assert DEFAULT_LAMBDA_C == 0.01

    def test_per_head_gradients_scaled(self):
        total = composite_loss(self._mk(1.0), self._mk(1.0), self._mk(1.0))
        np.testing.assert_allclose(total.grad_density, np.ones(3))
        np.testing.assert_allclose(total.grad_seg, 0.1 * np.ones(3))
        np.testing.assert_allclose(total.grad_gd, 0.01 * np.ones(3))


class TestGradcheck:
    def test_l2_quadratic_exact(self):
        rng = np.random.default_rng(13)
        target = rng.normal(size=(3, 3))
        point = rng.normal(size=(3, 3))

        def fn(x):
            res = lp_loss(x, target, p=2)
            return res.value, res.grad

        report = gradcheck(fn, point, rel_tol=1e-6)
        assert report.passed, report

    def test_catches_wrong_gradient(self):
        def fn(x):
            return float(np.sum(x**2)), 3.0 * x  # gradient off by 1.5x

        report = gradcheck(fn, np.array([1.0, 2.0]), rel_tol=1e-4)
        assert not report.passed

    def test_value_fn_used_for_perturbations(self):
        calls = {"value": 0}

        def fn(x):
            return float(np.sum(x**2)), 2.0 * x

        def value_only(x):
            calls["value"] += 1
            return float(np.sum(x**2))

        report = gradcheck(fn, np.array([1.0, 2.0]), rel_tol=1e-6, value_fn=value_only)
        assert report.passed
        assert calls["value"] == 4  # two coords, two sides each

    def test_report_fields(self):
        def fn(x):
            return float(np.sum(x**2)), 2.0 * x

        report = gradcheck(fn, np.array([1.0, 2.0, 3.0]), rel_tol=1e-6)
        assert report.n_coords == 3
        assert 0 <= report.worst_index < 3
        assert report.rel_tol == 1e-6

    def test_dm_loss_gradient(self):
        rng = np.random.default_rng(14)
        pred = rng.uniform(0.3, 1.0, size=(5, 5))
        target = rng.uniform(0.3, 1.0, size=(5, 5))
        distilled = rng.uniform(0.3, 1.0, size=(5, 5))
        if abs(pred.sum() - target.sum()) < 0.01:
            pred[0, 0] += 0.5

        def fn(x):
            res = dm_loss(x, target, distilled, max_iter=20000, tol=1e-9)
            return res.value, res.grad

        report = gradcheck(fn, pred, rel_tol=1e-3)
        assert report.passed, report


class TestDefaults:
    def test_gamma(self):
        assert DEFAULT_GAMMA == 2.0

    def test_eps(self):
        assert EPS_C == 1e-7

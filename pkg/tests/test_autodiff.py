"""Tests for the autodiff core: op values, gradient checks, AdamW."""

from __future__ import annotations

import math

import numpy as np
import pytest
from gradcheck import FD_STEP, assert_grads_close, fd_gradient

from miscalib.autodiff import (
    BNState,
    OptimState,
    Tensor2,
    adamw_step,
    add,
    batchnorm_forward,
    bce_with_logits,
    concat_cols,
    linear_forward,
    maxpool_over_points,
    meanpool_over_points,
    quantize_float32,
    relu,
    scale,
    sigmoid,
)


def t2(values):
    return Tensor2(np.asarray(values, dtype=float))


class TestLinear:
    def test_identity_weight(self):
        x = t2([[1.0, 2.0], [3.0, 4.0]])
        w = t2(np.eye(2))
        b = t2([[0.0, 0.0]])
        y = linear_forward(x, w, b)
        assert np.allclose(y.values, x.values)

    def test_hand_value(self):
        y = linear_forward(t2([[1.0, 2.0]]), t2([[1.0], [1.0]]), t2([[3.0]]))
        assert y.values.shape == (1, 1)
        assert y.values[0, 0] == 6.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            linear_forward(t2([[1.0, 2.0]]), t2([[1.0]]), t2([[0.0]]))

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = t2(rng.normal(size=(4, 3)))
            w = t2(rng.normal(size=(3, 2)))
            b = t2(rng.normal(size=(1, 2)))
            coeff = rng.normal(size=(4, 2))

            def run():
                return float((linear_forward(x, w, b).values * coeff).sum())

            y = linear_forward(x, w, b)
            y.backward(coeff)
            numeric = {
                "x": fd_gradient(run, x.values),
                "w": fd_gradient(run, w.values),
                "b": fd_gradient(run, b.values),
            }
            assert_grads_close({"x": x.grad, "w": w.grad, "b": b.grad}, numeric)


class TestBatchnorm:
    def test_train_normalizes_columns(self):
        rng = np.random.default_rng(1)
        x = t2(rng.normal(loc=3.0, scale=2.0, size=(64, 5)))
        state = BNState.create(5)
        y = batchnorm_forward(x, t2(np.ones((1, 5))), t2(np.zeros((1, 5))), state, "train")
        assert np.allclose(y.values.mean(axis=0), 0.0, atol=1e-6)
        assert np.allclose(y.values.var(axis=0), 1.0, atol=1e-3)

    def test_eval_applies_running_stats_exactly(self):
        state = BNState(np.array([[1.0, -2.0]]), np.array([[4.0, 0.25]]))
        x = t2([[3.0, 0.0], [1.0, -2.0]])
        gamma = t2([[2.0, 1.0]])
        beta = t2([[0.5, 0.0]])
        y = batchnorm_forward(x, gamma, beta, state, "eval")
        expected = (x.values - state.running_mean) / np.sqrt(state.running_var + 1e-5)
        expected = expected * gamma.values + beta.values
        assert np.allclose(y.values, expected, atol=0.0)

    def test_running_stats_update_with_momentum(self):
        state = BNState.create(2)
        x = t2([[1.0, 0.0], [3.0, 4.0]])
        batchnorm_forward(x, t2(np.ones((1, 2))), t2(np.zeros((1, 2))), state, "train")
        assert np.allclose(state.running_mean, 0.9 * 0.0 + 0.1 * np.array([[2.0, 2.0]]))
        assert np.allclose(state.running_var, 0.9 * 1.0 + 0.1 * np.array([[1.0, 4.0]]))

    def test_eval_does_not_mutate_stats(self):
        state = BNState.create(2)
        before = state.copy()
        batchnorm_forward(t2([[5.0, 5.0]]), t2(np.ones((1, 2))), t2(np.zeros((1, 2))), state, "eval")
        assert np.array_equal(state.running_mean, before.running_mean)
        assert np.array_equal(state.running_var, before.running_var)

    def test_batch_of_one_rejected_in_train(self):
        state = BNState.create(2)
        with pytest.raises(ValueError, match="batch size"):
            batchnorm_forward(t2([[1.0, 2.0]]), t2(np.ones((1, 2))), t2(np.zeros((1, 2))), state, "train")

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients_match_fd(self, mode):
        rng = np.random.default_rng(2)
        x = t2(rng.normal(size=(6, 4)))
        gamma = t2(rng.normal(size=(1, 4)))
        beta = t2(rng.normal(size=(1, 4)))
        coeff = rng.normal(size=(6, 4))
        base = BNState(rng.normal(size=(1, 4)), rng.uniform(0.5, 2.0, size=(1, 4)))

        def run():
            y = batchnorm_forward(x, gamma, beta, base.copy(), mode)
            return float((y.values * coeff).sum())

        y = batchnorm_forward(x, gamma, beta, base.copy(), mode)
        y.backward(coeff)
        numeric = {
            "x": fd_gradient(run, x.values),
            "gamma": fd_gradient(run, gamma.values),
            "beta": fd_gradient(run, beta.values),
        }
        assert_grads_close({"x": x.grad, "gamma": gamma.grad, "beta": beta.grad}, numeric)


class TestActivationsAndPooling:
    def test_relu_values(self):
        y = relu(t2([[-1.0, 0.0, 2.0]]))
        assert np.array_equal(y.values, [[0.0, 0.0, 2.0]])

    def test_sigmoid_values(self):
        y = sigmoid(t2([[0.0, 100.0, -100.0]]))
        assert np.allclose(y.values, [[0.5, 1.0, 0.0]], atol=1e-12)

    def test_pool_hand_values(self):
        x = t2([[1.0, 5.0], [3.0, 2.0]])
        assert np.array_equal(maxpool_over_points(x).values, [[3.0, 5.0]])
        assert np.array_equal(meanpool_over_points(x).values, [[2.0, 3.5]])

    def test_pool_segments(self):
        x = t2([[1.0, 0.0], [5.0, 2.0], [0.0, 7.0], [2.0, 1.0]])
        segs = [(0, 2), (2, 4)]
        assert np.array_equal(maxpool_over_points(x, segs).values, [[5.0, 2.0], [2.0, 7.0]])
        assert np.array_equal(meanpool_over_points(x, segs).values, [[3.0, 1.0], [1.0, 4.0]])

    def test_pool_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            maxpool_over_points(t2(np.zeros((0, 3))))

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(3)
        # values drawn continuous: no relu kinks or max ties at the probe points
        x = t2(rng.normal(size=(7, 3)) * 2.0 + 0.1)
        coeff = rng.normal(size=(2, 3))
        segs = [(0, 4), (4, 7)]

        for op in (
            lambda v: maxpool_over_points(v, segs),
            lambda v: meanpool_over_points(v, segs),
        ):
            x.zero_grad()

            def run():
                return float((op(x).values * coeff).sum())

            y = op(x)
            y.backward(coeff)
            assert_grads_close({"x": x.grad}, {"x": fd_gradient(run, x.values)})

        for act, c in ((relu, rng.normal(size=(7, 3))), (sigmoid, rng.normal(size=(7, 3)))):
            x.zero_grad()

            def run():
                return float((act(x).values * c).sum())

            y = act(x)
            y.backward(c)
            assert_grads_close({"x": x.grad}, {"x": fd_gradient(run, x.values)})

    def test_concat_add_scale(self):
        rng = np.random.default_rng(4)
        a = t2(rng.normal(size=(3, 2)))
        b = t2(rng.normal(size=(3, 4)))
        y = concat_cols(a, b)
        assert y.shape == (3, 6)
        coeff = rng.normal(size=(3, 6))
        y.backward(coeff)
        assert np.allclose(a.grad, coeff[:, :2])
        assert np.allclose(b.grad, coeff[:, 2:])

        c = t2(rng.normal(size=(2, 2)))
        d = t2(rng.normal(size=(2, 2)))
        s = scale(add(c, d), 3.0)
        s.backward(np.ones((2, 2)))
        assert np.allclose(c.grad, 3.0)
        assert np.allclose(d.grad, 3.0)


class TestBCEWithLogits:
    def test_zero_logit_is_log2(self):
        for target in (0.0, 1.0):
            loss = bce_with_logits(t2([[0.0]]), np.array([[target]]))
            assert math.isclose(loss.values[0, 0], math.log(2.0), abs_tol=1e-12)

    def test_large_logit_stable(self):
        loss = bce_with_logits(t2([[10000.0]]), np.array([[1.0]]))
        assert loss.values[0, 0] < 1e-4
        assert np.isfinite(loss.values[0, 0])
        loss = bce_with_logits(t2([[1e6]]), np.array([[0.0]]))
        assert np.isfinite(loss.values[0, 0])
        loss = bce_with_logits(t2([[-1e6]]), np.array([[1.0]]))
        assert np.isfinite(loss.values[0, 0])

    def test_gradient_is_sigmoid_minus_target(self):
        for z in (-3.0, 0.0, 3.0):
            for target in (0.0, 1.0):
                logits = t2([[z]])
                loss = bce_with_logits(logits, np.array([[target]]))
                loss.backward()
                expected = 1.0 / (1.0 + math.exp(-z)) - target
                assert math.isclose(logits.grad[0, 0], expected, abs_tol=1e-6)

    def test_mean_scaling_over_elements(self):
        logits = t2([[1.0, -2.0], [0.5, 0.0]])
        targets = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = bce_with_logits(logits, targets)
        loss.backward()
        z = logits.values
        per = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
        assert math.isclose(loss.values[0, 0], per.mean(), abs_tol=1e-12)
        manual = (1.0 / (1.0 + np.exp(-z)) - targets) / 4.0
        assert np.allclose(logits.grad, manual, atol=1e-12)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        logits = t2(rng.normal(size=(4, 3)))
        targets = (rng.uniform(size=(4, 3)) > 0.5).astype(float)

        def run():
            return float(bce_with_logits(logits, targets).values[0, 0])

        loss = bce_with_logits(logits, targets)
        loss.backward()
        assert_grads_close({"z": logits.grad}, {"z": fd_gradient(run, logits.values)})

    def test_bad_targets_rejected(self):
        with pytest.raises(ValueError):
            bce_with_logits(t2([[0.0]]), np.array([[0.5]]))


class TestAdamW:
    def test_zero_gradient_still_decays(self):
        # with g = 0 the moment update is 0/0-free and p shrinks by lr*wd*p
        p = np.array([[2.0]])
        state = OptimState(lr=0.1, weight_decay=0.01)
        adamw_step({"p": p}, {"p": np.array([[0.0]])}, state)
        assert math.isclose(p[0, 0], 2.0 - 0.1 * 0.01 * 2.0, abs_tol=1e-12)

    def test_scalar_single_step_hand_value(self):
        # m_hat = g, v_hat = g^2 at step 1, so p' = 1 - lr*(1/(1+eps) + wd)
        p = np.array([[1.0]])
        state = OptimState(lr=8e-3, weight_decay=1e-4)
        adamw_step({"p": p}, {"p": np.array([[1.0]])}, state)
        expected = 1.0 - 8e-3 * (1.0 / (1.0 + 1e-8) + 1e-4 * 1.0)
        assert math.isclose(p[0, 0], expected, abs_tol=1e-12)
        assert math.isclose(p[0, 0], 0.9920, abs_tol=1e-4)

    def test_two_step_unroll_matches_manual(self):
        rng = np.random.default_rng(6)
        p = rng.normal(size=(2, 3))
        g1 = rng.normal(size=(2, 3))
        g2 = rng.normal(size=(2, 3))
        lr, wd, b1, b2, eps = 8e-3, 1e-4, 0.9, 0.999, 1e-8

        # manual unroll, written independently of the implementation
        ref = p.copy()
        m = np.zeros_like(ref)
        v = np.zeros_like(ref)
        for t, g in ((1, g1), (2, g2)):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            ref = ref - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * ref)

        state = OptimState(lr=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps)
        adamw_step({"p": p}, {"p": g1}, state)
        adamw_step({"p": p}, {"p": g2}, state)
        assert np.allclose(p, ref, atol=1e-10)

    def test_non_finite_gradient_raises(self):
        state = OptimState()
        with pytest.raises(FloatingPointError, match="diverged"):
            adamw_step({"p": np.ones((1, 1))}, {"p": np.array([[float("nan")]])}, state)

    def test_deterministic_across_runs(self):
        def run():
            rng = np.random.default_rng(7)
            p = rng.normal(size=(4, 4))
            state = OptimState()
            for _ in range(10):
                adamw_step({"p": p}, {"p": rng.normal(size=(4, 4))}, state)
            return p

        a, b = run(), run()
        assert np.array_equal(a, b)


class TestTensor2:
    def test_rejects_3d(self):
        with pytest.raises(ValueError):
            Tensor2(np.zeros((2, 2, 2)))

    def test_backward_requires_scalar_without_seed(self):
        with pytest.raises(ValueError):
            t2([[1.0, 2.0]]).backward()

    def test_grad_accumulates_until_zeroed(self):
        x = t2([[1.0, 2.0]])
        y1 = scale(x, 2.0)
        y1.backward(np.ones((1, 2)))
        y2 = scale(x, 2.0)
        y2.backward(np.ones((1, 2)))
        assert np.allclose(x.grad, 4.0)
        x.zero_grad()
        assert x.grad is None

    def test_quantize_float32_idempotent(self):
        rng = np.random.default_rng(8)
        a = {"w": rng.normal(size=(3, 3))}
        quantize_float32(a)
        once = a["w"].copy()
        quantize_float32(a)
        assert np.array_equal(a["w"], once)
        assert np.array_equal(a["w"], a["w"].astype(np.float32).astype(np.float64))

"""Tests for the optimizers and learning-rate schedule."""

import numpy as np
import pytest

from apps.feature_critic.autodiff import ParamSet
from apps.feature_critic.errors import MissingGradient, ShapeMismatch
from apps.feature_critic.optim import (
    Optimizer,
    OptimizerState,
    StepSchedule,
    amsgrad_step,
    lr_at,
    momentum_sgd_step,
)


class TestAmsgrad:
    """AMSGrad without bias correction."""

    def test_first_step_values(self):
        param = np.array([[1.0, -2.0]])
        grad = np.array([[0.5, -0.25]])
        updated, state = amsgrad_step(OptimizerState(), param, grad, lr=0.1)

        m = 0.1 * grad
        v_hat = 0.001 * grad**2
        np.testing.assert_allclose(state.m, m)
        np.testing.assert_allclose(state.v_hat, v_hat)
        np.testing.assert_allclose(updated, param - 0.1 * m / (np.sqrt(v_hat) + 1e-8))

    def test_v_hat_never_decreases(self):
        param = np.zeros((1, 1))
        state = OptimizerState()
        _, state = amsgrad_step(state, param, np.array([[10.0]]), lr=0.01)
        peak = state.v_hat.copy()
        _, state = amsgrad_step(state, param, np.array([[0.0]]), lr=0.01)
        assert state.v_hat[0, 0] == peak[0, 0]
        assert state.v[0, 0] < peak[0, 0]

    def test_weight_decay_is_added_to_gradient(self):
        param = np.array([[2.0]])
        with_decay, _ = amsgrad_step(
            OptimizerState(), param, np.zeros((1, 1)), lr=0.1, weight_decay=0.5
        )
        plain, _ = amsgrad_step(OptimizerState(), param, np.array([[1.0]]), lr=0.1)
        np.testing.assert_allclose(with_decay, plain)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            amsgrad_step(OptimizerState(), np.zeros((2, 2)), np.zeros((1, 2)), 0.1)


class TestMomentum:
    """Momentum SGD."""

    def test_velocity_accumulates(self):
        param = np.zeros((1, 1))
        grad = np.ones((1, 1))
        param, state = momentum_sgd_step(OptimizerState(), param, grad, 0.1, 0.9)
        param, state = momentum_sgd_step(state, param, grad, 0.1, 0.9)
        np.testing.assert_allclose(state.velocity, [[1.9]])
        np.testing.assert_allclose(param, [[-0.1 - 0.19]])


class TestStepSchedule:
    """Piecewise-constant decay."""

    def setup_method(self):
        self.schedule = StepSchedule(0.1, (100, 200), (5.0, 10.0))

    def test_last_passed_milestone_wins(self):
        assert lr_at(self.schedule, 0) == pytest.approx(0.1)
        assert lr_at(self.schedule, 99) == pytest.approx(0.1)
        assert lr_at(self.schedule, 100) == pytest.approx(0.02)
        assert lr_at(self.schedule, 250) == pytest.approx(0.01)

    def test_scaled_to_shorter_run(self):
        scaled = self.schedule.scaled_to(50, 200)
        assert scaled.milestones == (25, 50)
        assert scaled.factors == self.schedule.factors

    def test_scaling_without_reference_is_identity(self):
        assert self.schedule.scaled_to(50, None) is self.schedule


class TestOptimizer:
    """Named groups share one Optimizer without sharing moments."""

    def test_groups_keep_separate_moments(self):
        optimizer = Optimizer("amsgrad")
        params = ParamSet(weight=np.ones((2, 2)))
        grads = {"weight": np.ones((2, 2))}
        optimizer.step("theta", params, grads, lr=0.01)
        optimizer.step("omega", params, grads, lr=0.01)
        assert set(optimizer.states) == {"theta/weight", "omega/weight"}
        assert optimizer.moment_shapes()["theta/weight"] == [(2, 2)] * 3

    def test_copy_is_independent(self):
        optimizer = Optimizer("momentum", 0.5)
        params = ParamSet(w=np.zeros((1, 3)))
        optimizer.step("g", params, {"w": np.ones((1, 3))}, lr=0.1)
        clone = optimizer.copy()
        optimizer.step("g", params, {"w": np.ones((1, 3))}, lr=0.1)
        np.testing.assert_allclose(clone.states["g/w"].velocity, np.ones((1, 3)))

    def test_missing_gradient(self):
        with pytest.raises(MissingGradient):
            Optimizer().step("theta", ParamSet(w=np.zeros((1, 1))), {}, lr=0.1)

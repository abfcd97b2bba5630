"""Tests for the reverse-mode autodiff tape."""

from collections import OrderedDict

import numpy as np
import pytest

from apps.feature_critic import autodiff as ad
from apps.feature_critic.autodiff import ParamSet, Tape
from apps.feature_critic.errors import (
    MissingGradient,
    NoActiveTape,
    NonDifferentiablePath,
    NonScalarRoot,
    ShapeMismatch,
)


def numeric_grad(f, x, eps=1e-6):
    flat = ad.finite_difference(lambda v: f(v.reshape(x.shape)), x, eps)
    return flat.reshape(x.shape)


class TestTape:
    """Recording and backward passes."""

    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_ops_need_an_active_tape(self):
        with pytest.raises(NoActiveTape):
            ad.constant(np.ones((2, 2)))

    def test_values_are_float64_matrices(self):
        with Tape() as tape:
            node = tape.param("w", [1, 2, 3])
        assert node.shape == (1, 3)
        assert node.value.dtype == np.float64

    def test_nested_tapes_restore_outer(self):
        with Tape() as outer:
            with Tape() as inner:
                assert ad.active_tape() is inner
            assert ad.active_tape() is outer

    def test_matmul_gradient(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.normal(size=(4, 2))
        with Tape() as tape:
            a_node = tape.param("a", a)
            b_node = tape.param("b", b)
            root = ad.reduce_sum(ad.matmul(a_node, b_node))
            grads = ad.backward(tape, root)
        np.testing.assert_allclose(grads["a"], np.ones((3, 2)) @ b.T)
        np.testing.assert_allclose(grads["b"], a.T @ np.ones((3, 2)))

    def test_matmul_shape_mismatch(self):
        with Tape() as tape:
            with pytest.raises(ShapeMismatch):
                ad.matmul(tape.param("a", np.ones((2, 3))), np.ones((2, 3)))

    def test_row_broadcast_add_sums_bias_gradient(self):
        with Tape() as tape:
            x = tape.constant(np.ones((5, 3)))
            bias = tape.param("bias", np.zeros((1, 3)))
            root = ad.reduce_sum(ad.add(x, bias))
            grads = ad.backward(tape, root)
        np.testing.assert_allclose(grads["bias"], np.full((1, 3), 5.0))

    def test_relu_subgradient_at_zero_is_zero(self):
        with Tape() as tape:
            x = tape.param("x", np.array([[-1.0, 0.0, 2.0]]))
            grads = ad.backward(tape, ad.reduce_sum(ad.relu(x)))
        np.testing.assert_array_equal(grads["x"], [[0.0, 0.0, 1.0]])

    def test_softplus_matches_finite_difference(self):
        x = self.rng.normal(size=(2, 3))

        def f(values):
            with Tape():
                return ad.reduce_sum(ad.softplus(ad.constant(values))).item()

        with Tape() as tape:
            node = tape.param("x", x)
            grads = ad.backward(tape, ad.reduce_sum(ad.softplus(node)))
        np.testing.assert_allclose(grads["x"], numeric_grad(f, x), rtol=1e-6)

    def test_softmax_ce_gradient(self):
        logits = self.rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 2])

        def f(values):
            with Tape():
                return ad.reduce_sum(ad.softmax_ce(ad.constant(values), labels)).item()

        with Tape() as tape:
            node = tape.param("logits", logits)
            grads = ad.backward(tape, ad.reduce_sum(ad.softmax_ce(node, labels)))
        np.testing.assert_allclose(grads["logits"], numeric_grad(f, logits), atol=1e-7)

    def test_softmax_ce_is_stable_for_large_logits(self):
        with Tape():
            losses = ad.softmax_ce(ad.constant([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(losses.value).all()
        assert losses.value[0, 0] == pytest.approx(0.0)

    def test_take_and_scatter_add_are_adjoint(self):
        index = np.array([[0, 1], [1, 3]])
        with Tape() as tape:
            x = tape.param("x", np.arange(4.0).reshape(2, 2))
            grads = ad.backward(tape, ad.reduce_sum(ad.take(x, index)))
        np.testing.assert_array_equal(grads["x"], [[1.0, 2.0], [0.0, 1.0]])

    def test_gram_matches_triple_loop(self):
        features = self.rng.normal(size=(7, 5))
        with Tape():
            value = ad.gram(ad.constant(features)).value
        expected = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                for m in range(7):
                    expected[i, j] += features[m, i] * features[m, j]
        np.testing.assert_allclose(value, expected, rtol=0, atol=1e-12)

    def test_gram_ignores_row_order_exactly(self):
        features = self.rng.normal(size=(64, 16))
        with Tape():
            a = ad.gram(ad.constant(features)).value
            b = ad.gram(ad.constant(features[self.rng.permutation(64)])).value
        np.testing.assert_array_equal(a, b)

    def _two_losses(self, a, w):
        x = ad.constant(a)
        f = ad.reduce_sum(ad.tanh(ad.matmul(x, w)))
        g = ad.reduce_sum(ad.softplus(w))
        return f, g

    def test_backward_is_linear(self):
        a = self.rng.normal(size=(5, 3))
        w0 = self.rng.normal(size=(3, 2))
        coef_f, coef_g = 0.7, -2.3
        grads = {}
        for kind in ("f", "g", "mix"):
            with Tape() as tape:
                w = tape.param("w", w0)
                f, g = self._two_losses(a, w)
                root = {
                    "f": f,
                    "g": g,
                    "mix": ad.add(ad.scale(f, coef_f), ad.scale(g, coef_g)),
                }[kind]
                grads[kind] = ad.backward(tape, root)["w"]
        expected = coef_f * grads["f"] + coef_g * grads["g"]
        np.testing.assert_allclose(grads["mix"], expected, rtol=0, atol=1e-12)

    def test_replaying_a_graph_is_bit_identical(self):
        a = self.rng.normal(size=(5, 3))
        w0 = self.rng.normal(size=(3, 2))
        runs = []
        for _ in range(2):
            with Tape() as tape:
                w = tape.param("w", w0)
                f, g = self._two_losses(a, w)
                root = ad.add(f, g)
                runs.append((root.item(), ad.backward(tape, root)["w"]))
        assert runs[0][0] == runs[1][0]
        np.testing.assert_array_equal(runs[0][1], runs[1][1])

    def test_root_must_be_scalar(self):
        with Tape() as tape:
            x = tape.param("x", np.ones((2, 2)))
            with pytest.raises(NonScalarRoot):
                ad.backward(tape, ad.relu(x))

    def test_unreachable_parameter_gets_zeros(self):
        with Tape() as tape:
            x = tape.param("x", np.ones((1, 2)))
            unused = tape.param("unused", np.ones((3, 1)))
            grads = ad.backward(tape, ad.reduce_sum(x), {"x": x, "unused": unused})
        np.testing.assert_array_equal(grads["unused"], np.zeros((3, 1)))

    def test_first_order_backward_leaves_tape_untouched(self):
        with Tape() as tape:
            x = tape.param("x", np.ones((2, 2)))
            root = ad.reduce_sum(ad.tanh(x))
            before = len(tape)
            ad.backward(tape, root)
        assert len(tape) == before


class TestSecondOrder:
    """Reverse-over-reverse differentiation."""

    def test_second_derivative_of_tanh(self):
        x0 = np.array([[0.3, -0.7]])
        with Tape() as tape:
            x = tape.param("x", x0)
            first = ad.backward(tape, ad.reduce_sum(ad.tanh(x)), create_graph=True)
            second = ad.backward(tape, ad.reduce_sum(first["x"]), {"x": x})
        y = np.tanh(x0)
        np.testing.assert_allclose(second["x"], -2.0 * y * (1.0 - y**2))

    def test_relu_has_zero_second_derivative(self):
        with Tape() as tape:
            x = tape.param("x", np.array([[0.5, -0.5]]))
            root = ad.reduce_sum(ad.elementwise_mul(ad.relu(x), x))
            first = ad.backward(tape, root, create_graph=True)
            second = ad.backward(tape, ad.reduce_sum(first["x"]), {"x": x})
        np.testing.assert_allclose(second["x"], [[2.0, 0.0]])

    def test_softmax_ce_refuses_second_order(self):
        with Tape() as tape:
            x = tape.param("x", np.zeros((2, 3)))
            root = ad.reduce_sum(ad.softmax_ce(x, np.array([0, 1])))
            with pytest.raises(NonDifferentiablePath):
                ad.backward(tape, root, create_graph=True)


class TestHypergradient:
    """Differentiating an outer loss through one gradient step."""

    def test_quadratic_matches_closed_form(self):
        # inner = 0.5 * sum(w * theta^2), so theta_new = (1 - alpha w) theta and
        # d sum(theta_new) / d w = -alpha * theta
        theta = ParamSet(t=np.array([[1.0, 2.0]]))
        omega = ParamSet(w=np.array([[0.5, 0.25]]))
        alpha = 0.1

        def inner(theta_nodes, omega_nodes):
            t = theta_nodes["t"]
            weighted = ad.elementwise_mul(omega_nodes["w"], ad.elementwise_mul(t, t))
            return ad.scale(ad.reduce_sum(weighted), 0.5)

        def outer(theta_new):
            return ad.reduce_sum(theta_new["t"])

        result = ad.grad_through_update(inner, outer, theta, omega, alpha)
        np.testing.assert_allclose(result.omega_grad["w"], -alpha * theta["t"])
        np.testing.assert_allclose(
            result.theta_new["t"], (1 - alpha * omega["w"]) * theta["t"]
        )

    def test_base_point_shifts_the_step(self):
        theta = ParamSet(t=np.array([[1.0]]))
        base = ParamSet(t=np.array([[10.0]]))
        omega = ParamSet(w=np.array([[2.0]]))

        def inner(theta_nodes, omega_nodes):
            return ad.reduce_sum(
                ad.elementwise_mul(omega_nodes["w"], theta_nodes["t"])
            )

        result = ad.grad_through_update(
            inner, lambda new: ad.reduce_sum(new["t"]), theta, omega, 0.5, base
        )
        np.testing.assert_allclose(result.theta_new["t"], [[9.0]])
        np.testing.assert_allclose(result.omega_grad["w"], [[-0.5]])


class TestParamSet:
    """Parameter containers and helpers."""

    def test_flat_round_trip_keeps_shapes(self):
        params = ParamSet(a=np.ones((2, 3)), b=np.zeros((1, 2)))
        rebuilt = params.with_flat(params.flat())
        assert rebuilt.shapes() == {"a": (2, 3), "b": (1, 2)}
        assert params.size == 8

    def test_with_flat_checks_size(self):
        with pytest.raises(ShapeMismatch):
            ParamSet(a=np.ones((2, 2))).with_flat(np.zeros(3))

    def test_fingerprint_depends_on_values(self):
        a = ParamSet(w=np.ones((2, 2)))
        b = a.copy()
        assert a.fingerprint() == b.fingerprint()
        b["w"] = b["w"] * 2
        assert a.fingerprint() != b.fingerprint()

    def test_descend_needs_every_gradient(self):
        with pytest.raises(MissingGradient):
            ad.descend(OrderedDict(w=np.ones((1, 1))), {}, 0.1)

    def test_relative_error_of_zero_vectors(self):
        assert ad.relative_error(np.zeros(3), np.zeros(3)) == 0.0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftadapt.layers import (
    LinearLayer,
    MlpModel,
    dropout,
    hard_cross_entropy,
    hard_cross_entropy_grad,
    soft_cross_entropy,
    soft_cross_entropy_grad,
    softmax,
)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


class TestLinearForward:
    def test_scalar_affine(self):
        layer = LinearLayer([[2.0]], [1.0])
        np.testing.assert_allclose(layer.forward([[3.0]]), [[7.0]])

    def test_identity_weight(self):
        layer = LinearLayer(np.eye(2), [0.0, 0.0])
        out = layer.forward([[1.7, -2.4]])
        np.testing.assert_allclose(out, [[1.7, -2.4]])

    def test_hand_product(self):
        layer = LinearLayer([[1.0, 1.0], [1.0, -1.0]], [0.0, 0.0])
        out = layer.forward([[2.0, 3.0]])
        np.testing.assert_allclose(out, [[5.0, -1.0]])

    def test_dimension_mismatch(self):
        layer = LinearLayer([[1.0, 2.0]], [0.0])
        with pytest.raises(ValueError):
            layer.forward([[1.0, 2.0, 3.0]])


class TestLinearBackward:
    def test_zero_grad_out(self):
        layer = LinearLayer([[2.0, 1.0]], [0.0])
        grad_in = layer.backward([[1.0, 2.0]], [[0.0]])
        assert np.all(layer.weight_grad == 0.0)
        assert np.all(layer.bias_grad == 0.0)
        assert np.all(grad_in == 0.0)

    def test_scalar_chain_rule(self):
        layer = LinearLayer([[2.0]], [0.0])
        grad_in = layer.backward([[3.0]], [[1.0]])
        np.testing.assert_allclose(layer.weight_grad, [[3.0]])
        np.testing.assert_allclose(layer.bias_grad, [1.0])
        np.testing.assert_allclose(grad_in, [[2.0]])

    def test_accumulation(self):
        layer = LinearLayer([[2.0]], [0.0])
        layer.backward([[3.0]], [[1.0]])
        layer.backward([[3.0]], [[1.0]])
        np.testing.assert_allclose(layer.weight_grad, [[6.0]])
        layer.zero_grad()
        assert np.all(layer.weight_grad == 0.0)

    def test_matches_finite_differences(self):
        # loss L(W, b) = sum(W x + b); dL/dW via central differences
        g = rng(1)
        layer = LinearLayer(g.normal(size=(3, 4)), g.normal(size=3))
        x = g.normal(size=(5, 4))
        layer.backward(x, np.ones((5, 3)))
        h = 1e-5
        for grad, param in [(layer.weight_grad, layer.weight), (layer.bias_grad, layer.bias)]:
            it = np.nditer(param, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = param[idx]
                param[idx] = orig + h
                up = layer.forward(x).sum()
                param[idx] = orig - h
                down = layer.forward(x).sum()
                param[idx] = orig
                fd = (up - down) / (2 * h)
                assert grad[idx] == pytest.approx(fd, rel=1e-6)


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax([[0.0, 0.0]]), [[0.5, 0.5]])

    def test_constant_row_uniform(self):
        np.testing.assert_allclose(softmax([[4.2, 4.2, 4.2]]), np.full((1, 3), 1 / 3))

    def test_log_two_closed_form(self):
        out = softmax([[np.log(2.0), 0.0]])
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_large_logits_stable(self):
        out = softmax([[1000.0, 0.0], [-1000.0, -999.0]])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(axis=1), [1.0, 1.0], atol=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rows_sum_to_one_and_positive(self, seed):
        logits = rng(seed).normal(scale=10.0, size=(4, 6))
        probs = softmax(logits)
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(4), atol=1e-9)
        assert np.all(probs > 0.0)


class TestSoftCrossEntropy:
    def test_perfect_match_is_zero(self):
        assert soft_cross_entropy([[1.0, 0.0]], [[1.0, 0.0]]) == pytest.approx(0.0, abs=1e-9)

    def test_half_mass_hand_value(self):
        # -(1/2) ln 0.5 = 0.34657359...
        val = soft_cross_entropy([[1.0, 0.0]], [[0.5, 0.5]])
        assert val == pytest.approx(0.5 * np.log(2.0), abs=1e-9)
        assert val == pytest.approx(0.3465736, abs=1e-7)

    def test_uniform_pair_hand_value(self):
        val = soft_cross_entropy([[0.5, 0.5]], [[0.5, 0.5]])
        assert val == pytest.approx(0.3465736, abs=1e-7)

    def test_non_negative(self):
        g = rng(7)
        for _ in range(50):
            y1 = softmax(g.normal(size=(3, 5)))
            y2 = softmax(g.normal(size=(3, 5)))
            assert soft_cross_entropy(y1, y2) >= 0.0

    def test_clamp_keeps_loss_finite(self):
        assert np.isfinite(soft_cross_entropy([[0.0, 1.0]], [[1.0, 0.0]]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_cross_entropy([[1.0, 0.0]], [[1.0, 0.0, 0.0]])

    def test_grad_matches_finite_differences(self):
        g = rng(3)
        y_tilde = softmax(g.normal(size=(4, 3)))
        logits = g.normal(size=(4, 3))
        grad = soft_cross_entropy_grad(y_tilde, softmax(logits))
        h = 1e-6
        for b in range(4):
            for c in range(3):
                up = logits.copy()
                up[b, c] += h
                down = logits.copy()
                down[b, c] -= h
                fd = (
                    soft_cross_entropy(y_tilde, softmax(up))
                    - soft_cross_entropy(y_tilde, softmax(down))
                ) / (2 * h)
                assert grad[b, c] == pytest.approx(fd, rel=1e-5, abs=1e-10)


class TestHardCrossEntropy:
    def test_confident_correct_is_small(self):
        assert hard_cross_entropy([0], [[0.999, 0.001]]) == pytest.approx(-np.log(0.999))

    def test_grad_matches_finite_differences(self):
        g = rng(5)
        labels = np.array([0, 2, 1])
        logits = g.normal(size=(3, 3))
        grad = hard_cross_entropy_grad(labels, softmax(logits))
        h = 1e-6
        for b in range(3):
            for c in range(3):
                up = logits.copy()
                up[b, c] += h
                down = logits.copy()
                down[b, c] -= h
                fd = (
                    hard_cross_entropy(labels, softmax(up))
                    - hard_cross_entropy(labels, softmax(down))
                ) / (2 * h)
                assert grad[b, c] == pytest.approx(fd, rel=1e-5, abs=1e-10)


class TestDropout:
    def test_rate_zero_identity(self):
        x = rng(0).normal(size=(10, 10))
        out = dropout(x, 0.0, rng(1), active=True)
        np.testing.assert_array_equal(out, x)

    def test_inactive_identity(self):
        x = rng(0).normal(size=(10, 10))
        out = dropout(x, 0.9, rng(1), active=False)
        np.testing.assert_array_equal(out, x)

    def test_zero_fraction_statistics(self):
        x = np.ones((100, 1000))
        out = dropout(x, 0.5, rng(42), active=True)
        zero_frac = (out == 0.0).mean()
        assert zero_frac == pytest.approx(0.5, abs=0.01)

    def test_survivors_scaled(self):
        x = np.ones((50, 50))
        out = dropout(x, 0.25, rng(3), active=True)
        survivors = out[out != 0.0]
        np.testing.assert_allclose(survivors, 1.0 / 0.75)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            dropout(np.ones((2, 2)), 1.0, rng(0))


class TestMlpModel:
    def test_zero_model_uniform_probs(self):
        layers = [LinearLayer(np.zeros((3, 4)), np.zeros(3))]
        model = MlpModel(layers)
        probs = model.predict_proba(rng(0).normal(size=(5, 4)))
        np.testing.assert_allclose(probs, np.full((5, 3), 1 / 3))

    def test_dims_must_chain(self):
        bad = [LinearLayer(np.zeros((3, 4)), np.zeros(3)), LinearLayer(np.zeros((2, 5)), np.zeros(2))]
        with pytest.raises(ValueError):
            MlpModel(bad)

    def test_full_backward_matches_finite_differences(self):
        g = rng(11)
        model = MlpModel.init(4, (6, 5), 3, g)
        x = g.normal(size=(7, 4))
        labels = g.integers(0, 3, size=7)
        probs = softmax(model.forward(x))
        model.backward(hard_cross_entropy_grad(labels, probs))
        h = 1e-5
        for param, grad in zip(model.parameters(), model.gradients()):
            flat_idx = [(0,) * param.ndim, tuple(s - 1 for s in param.shape)]
            for idx in flat_idx:
                orig = param[idx]
                param[idx] = orig + h
                up = hard_cross_entropy(labels, softmax(model.forward(x)))
                param[idx] = orig - h
                down = hard_cross_entropy(labels, softmax(model.forward(x)))
                param[idx] = orig
                fd = (up - down) / (2 * h)
                assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_backward_requires_deterministic_forward(self):
        model = MlpModel.init(4, (6,), 3, rng(0), dropout_rate=0.5)
        model.forward(rng(1).normal(size=(2, 4)), rng=rng(2))
        with pytest.raises(RuntimeError):
            model.backward(np.ones((2, 3)))

    def test_last_hidden_exposed(self):
        model = MlpModel.init(4, (6,), 3, rng(0))
        model.forward(rng(1).normal(size=(5, 4)))
        assert model.last_hidden.shape == (5, 6)

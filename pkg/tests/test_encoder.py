import numpy as np
import pytest

from gnsp.encoder import (
    Activation,
    DualEncoder,
    EncoderLayer,
    EncoderStack,
    backward,
    finite_diff_grad,
    forward,
    gelu,
    init_stack,
)
from gnsp.linalg import ShapeMismatchError


def identity_stack(dim: int, normalize: bool = False) -> EncoderStack:
    layer = EncoderLayer(
        weight=np.eye(dim), bias=np.zeros(dim), activation=Activation.IDENTITY
    )
    return EncoderStack(layers=[layer], normalize_output=normalize)


class TestInitStack:
    def test_deterministic(self):
        a = init_stack([4, 6, 3], seed=42)
        b = init_stack([4, 6, 3], seed=42)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.weight, lb.weight)
            assert np.array_equal(la.bias, lb.bias)

    def test_glorot_bound(self):
        stack = init_stack([4, 4], seed=1)
        bound = np.sqrt(6 / 8)
        assert np.all(np.abs(stack.layers[0].weight) <= bound)

    def test_empty_dims_rejected(self):
        with pytest.raises(ValueError):
            init_stack([], seed=0)
        with pytest.raises(ValueError):
            init_stack([5], seed=0)

    def test_biases_zero_and_final_identity(self):
        stack = init_stack([3, 8, 8, 2], seed=3)
        for layer in stack.layers:
            assert np.array_equal(layer.bias, np.zeros(layer.d_out))
        assert stack.layers[-1].activation is Activation.IDENTITY
        assert all(l.activation is Activation.GELU for l in stack.layers[:-1])


class TestForward:
    def test_identity_network(self):
        rng = np.random.default_rng(0)
        batch = rng.standard_normal((5, 3))
        out, trace = forward(identity_stack(3), batch, capture=True)
        assert np.array_equal(out, batch)
        assert np.array_equal(trace.layer_inputs[0], batch)

    def test_normalized_output_unit_rows(self):
        stack = init_stack([4, 6, 3], seed=5, normalize_output=True)
        out, _ = forward(stack, np.random.default_rng(1).standard_normal((7, 4)))
        assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) <= 1e-12

    def test_gelu_saturates_negative_tail(self):
        layer = EncoderLayer(np.eye(1), np.zeros(1), Activation.GELU)
        # hidden GELU then identity output layer
        out_layer = EncoderLayer(np.eye(1), np.zeros(1), Activation.IDENTITY)
        stack = EncoderStack([layer, out_layer], normalize_output=False)
        out, _ = forward(stack, np.array([[-100.0]]))
        assert abs(out[0, 0]) < 1e-12

    def test_capture_replay_bitwise(self):
        stack = init_stack([4, 5, 3], seed=6, normalize_output=True)
        batch = np.random.default_rng(2).standard_normal((6, 4))
        out, trace = forward(stack, batch, capture=True)
        replay, _ = forward(stack, trace.layer_inputs[0])
        assert np.array_equal(out, replay)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            forward(identity_stack(3), np.zeros((2, 4)))


class TestBackward:
    def test_zero_upstream(self):
        stack = init_stack([3, 4, 2], seed=7)
        batch = np.random.default_rng(3).standard_normal((5, 3))
        out, trace = forward(stack, batch, capture=True)
        grads = backward(stack, trace, np.zeros_like(out))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.d_weight)

    def test_single_linear_layer_hand_rule(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((3, 2))
        stack = EncoderStack(
            [EncoderLayer(w, np.zeros(2), Activation.IDENTITY)], normalize_output=False
        )
        x = rng.standard_normal((6, 3))
        d = rng.standard_normal((6, 2))
        _, trace = forward(stack, x, capture=True)
        grads = backward(stack, trace, d)
        assert np.allclose(grads.d_weight[0], x.T @ d)

    def test_frozen_layer_zero_block_gradient_still_flows(self):
        stack = init_stack([3, 5, 4, 2], seed=8)
        stack.layers[1].trainable = False
        batch = np.random.default_rng(5).standard_normal((4, 3))
        out, trace = forward(stack, batch, capture=True)
        grads = backward(stack, trace, np.ones_like(out))
        assert np.array_equal(grads.d_weight[1], np.zeros_like(stack.layers[1].weight))
        assert np.any(grads.d_weight[0] != 0)

    def test_matches_finite_differences_random_instances(self):
        rng = np.random.default_rng(9)
        for trial in range(50):
            n_layers = int(rng.integers(1, 4))
            dims = [int(rng.integers(2, 17)) for _ in range(n_layers + 1)]
            normalize = bool(rng.integers(0, 2))
            stack = init_stack(dims, seed=int(rng.integers(1 << 30)), normalize_output=normalize)
            batch = rng.standard_normal((int(rng.integers(1, 9)), dims[0]))
            upstream = rng.standard_normal((batch.shape[0], dims[-1]))
            _, trace = forward(stack, batch, capture=True)
            analytic = backward(stack, trace, upstream)

            def loss_fn(st):
                out, _ = forward(st, batch)
                return float(np.sum(out * upstream))

            numeric = finite_diff_grad(stack, loss_fn, 1e-5)
            for a, n in zip(analytic.d_weight, numeric.d_weight):
                big = np.abs(a) > 1e-6
                assert np.all(np.abs(a[big] - n[big]) / np.abs(a[big]) <= 1e-4)
                assert np.all(np.abs(a[~big] - n[~big]) <= 1e-7)

    def test_trace_stack_mismatch(self):
        stack = init_stack([3, 4, 2], seed=10)
        other = init_stack([3, 2], seed=11)
        batch = np.zeros((2, 3))
        _, trace = forward(other, batch, capture=True)
        with pytest.raises(ShapeMismatchError):
            backward(stack, trace, np.zeros((2, 2)))


class TestFiniteDiffGrad:
    def test_constant_loss(self):
        stack = init_stack([2, 3], seed=12)
        grads = finite_diff_grad(stack, lambda st: 1.25, 1e-5)
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.d_weight)

    def test_linear_functional(self):
        stack = init_stack([2, 3], seed=13)
        grads = finite_diff_grad(
            stack, lambda st: float(sum(np.sum(l.weight) for l in st.layers)), 1e-4
        )
        assert np.allclose(grads.d_weight[0], np.ones_like(grads.d_weight[0]), atol=1e-9)

    def test_quadratic_loss(self):
        stack = init_stack([3, 2], seed=14)
        w0 = stack.layers[0].weight.copy()
        grads = finite_diff_grad(
            stack, lambda st: 0.5 * float(np.sum(st.layers[0].weight ** 2)), 1e-5
        )
        assert np.allclose(grads.d_weight[0], w0, atol=1e-9)
        # weights restored exactly
        assert np.array_equal(stack.layers[0].weight, w0)


class TestDualEncoder:
    def test_embedding_dim_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            DualEncoder(init_stack([4, 3], seed=0), init_stack([5, 2], seed=1))

    def test_temperature_positive(self):
        with pytest.raises(ValueError):
            DualEncoder(init_stack([4, 3], seed=0), init_stack([5, 3], seed=1), temperature=0.0)


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 101)
    c = np.sqrt(2 / np.pi)
    expected = 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x**3)))
    assert np.allclose(gelu(x), expected, atol=1e-15)

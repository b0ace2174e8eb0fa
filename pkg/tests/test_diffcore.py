"""
Tests for the diffcore autodiff engine: forward values, backward rules
against central finite differences, tape ordering, the optimizer and the
parameter store.
"""

import numpy as np
import pytest

from diffcore import (
    AdamState,
    ComputationTape,
    MissingGradientError,
    ParameterStore,
    ShapeError,
    Tensor,
    adam_step,
    avg_pool,
    bilinear_sample,
    check_gradients,
    concat,
    conv2d,
    conv3d,
    exp,
    grad_enabled,
    linear,
    log,
    log_softmax,
    no_grad,
    sigmoid,
    sine,
    sine_uniform,
    softmax,
    upsample,
)

OP_TOLERANCE = 1e-3


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


class TestElementwise:
    """Arithmetic, broadcasting and pointwise functions."""

    def test_add_mul_forward(self):
        a = Tensor([1.0, 2.0, 3.0])
        b = Tensor([4.0, 5.0, 6.0])
        np.testing.assert_allclose((a + b).data, [5, 7, 9])
        np.testing.assert_allclose((a * b).data, [4, 10, 18])
        np.testing.assert_allclose((b - a).data, [3, 3, 3])
        np.testing.assert_allclose((b / a).data, [4, 2.5, 2])

    def test_broadcast_gradient_sums_out_axes(self, rng):
        a = leaf(rng, 3, 4)
        b = leaf(rng, 4)
        (a * b).sum().backward()
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0), rtol=1e-5)
        np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (3, 4)), rtol=1e-5)

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    @pytest.mark.parametrize("op", [
        lambda a, b: a + b,
        lambda a, b: a - b,
        lambda a, b: a * b,
        lambda a, b: a / (b * b + 1.0),
        lambda a, b: a @ b.transpose(),
    ])
    def test_binary_gradients(self, rng, op):
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
        assert check_gradients(lambda: op(a, b), [a, b], rng=rng) < OP_TOLERANCE

    @pytest.mark.parametrize("fn", [
        lambda x: sine(x),
        lambda x: sine(x, 30.0),
        lambda x: sigmoid(x),
        lambda x: exp(x),
        lambda x: log(x * x + 1.0),
        lambda x: -x,
        lambda x: x.mean(axis=1),
        lambda x: x.sum(axis=0, keepdims=True),
        lambda x: x.reshape(4, 3),
        lambda x: x[1:, ::2],
    ])
    def test_unary_gradients(self, rng, fn):
        x = leaf(rng, 3, 4, low=-0.5, high=0.5)
        assert check_gradients(lambda: fn(x), [x], step=1e-3, rng=rng) < OP_TOLERANCE

    def test_sine_omega_scales_argument(self):
        x = Tensor([0.1, 0.2])
        np.testing.assert_allclose(sine(x, 30.0).data, np.sin(30.0 * np.array([0.1, 0.2])), rtol=1e-5)


class TestReductionsAndSoftmax:
    def test_softmax_sums_to_one(self, rng):
        x = Tensor(rng.normal(size=(7, 3, 3)))
        np.testing.assert_allclose(softmax(x, axis=0).data.sum(axis=0), 1.0, rtol=1e-5)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = Tensor(rng.normal(size=(5, 4)) * 10.0)
        np.testing.assert_allclose(log_softmax(x, axis=0).data, np.log(softmax(x, axis=0).data), atol=1e-4)

    def test_softmax_gradients(self, rng):
        x = leaf(rng, 4, 3)
        assert check_gradients(lambda: softmax(x, axis=0), [x], rng=rng) < OP_TOLERANCE
        assert check_gradients(lambda: log_softmax(x, axis=0), [x], rng=rng) < OP_TOLERANCE

    def test_concat_gradients(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 4, 3)
        out = concat([a, b], axis=0)
        assert out.shape == (6, 3)
        assert check_gradients(lambda: concat([a, b], axis=0), [a, b], rng=rng) < OP_TOLERANCE


class TestLayers:
    """Convolutions, pooling, upsampling, bilinear sampling and linear layers."""

    # every layer is linear in each input, so a larger step adds no truncation error

    def test_conv2d_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(1, 5, 5)))
        kernel = np.zeros((1, 1, 3, 3), dtype=np.float32)
        kernel[0, 0, 1, 1] = 1.0
        np.testing.assert_allclose(conv2d(x, Tensor(kernel), padding=1).data, x.data)

    def test_conv2d_output_extent(self, rng):
        out = conv2d(Tensor(rng.normal(size=(2, 9, 9))), Tensor(rng.normal(size=(3, 2, 3, 3))), stride=2)
        assert out.shape == (3, 4, 4)

    def test_conv2d_gradients(self, rng):
        x, w, b = leaf(rng, 2, 6, 6), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
        assert check_gradients(lambda: conv2d(x, w, b, padding=1), [x, w, b], step=1e-2, rng=rng) < OP_TOLERANCE

    def test_strided_conv2d_gradients(self, rng):
        x, w = leaf(rng, 1, 7, 7), leaf(rng, 2, 1, 3, 3)
        assert check_gradients(lambda: conv2d(x, w, stride=2), [x, w], step=1e-2, rng=rng) < OP_TOLERANCE

    def test_conv3d_gradients(self, rng):
        x, w, b = leaf(rng, 2, 4, 4, 4), leaf(rng, 2, 2, 3, 3, 3), leaf(rng, 2)
        assert check_gradients(lambda: conv3d(x, w, b, padding=1), [x, w, b], step=1e-2, rng=rng) < OP_TOLERANCE

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 4, 4\)"):
            conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_pool_and_upsample(self, rng):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
        pooled = avg_pool(x)
        np.testing.assert_allclose(pooled.data[0], [[2.5, 4.5], [10.5, 12.5]])
        assert upsample(pooled).shape == (1, 4, 4)
        y = leaf(rng, 2, 4, 4, 4)
        assert check_gradients(lambda: avg_pool(y), [y], step=1e-2, rng=rng) < OP_TOLERANCE
        assert check_gradients(lambda: upsample(y), [y], step=1e-2, rng=rng) < OP_TOLERANCE

    def test_pool_rejects_odd_extent(self):
        with pytest.raises(ShapeError):
            avg_pool(Tensor(np.ones((1, 3, 4))))

    def test_bilinear_sample_interpolates(self):
        image = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
        out = bilinear_sample(image, np.array([[0.5, 0.5], [0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(out.data[:, 0], [1.5, 1.0, 2.0], rtol=1e-6)

    def test_bilinear_sample_clamps_to_edge(self):
        image = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
        out = bilinear_sample(image, np.array([[-5.0, -5.0], [9.0, 9.0]]))
        np.testing.assert_allclose(out.data[:, 0], [0.0, 3.0])

    def test_bilinear_sample_gradients(self, rng):
        image = leaf(rng, 3, 6, 6)
        coords = rng.uniform(-1.0, 6.0, size=(10, 2))
        assert check_gradients(lambda: bilinear_sample(image, coords), [image], step=1e-2, rng=rng) < OP_TOLERANCE

    def test_linear_gradients(self, rng):
        x, w, b = leaf(rng, 5, 3), leaf(rng, 3, 4), leaf(rng, 4)
        assert linear(x, w, b).shape == (5, 4)
        assert check_gradients(lambda: linear(x, w, b), [x, w, b], step=1e-2, rng=rng) < OP_TOLERANCE

    def test_sine_uniform_bound(self, rng):
        w = sine_uniform(rng, (64, 64), fan_in=64, omega=30.0)
        assert np.abs(w).max() <= np.sqrt(6.0 / 64) / 30.0 * (1 + 1e-6)


class TestTape:
    def test_shared_subexpression_gets_summed_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        (y + y).backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_tape_is_in_recording_order(self, rng):
        x = leaf(rng, 3)
        out = sine(x * 2.0).sum()
        tape = ComputationTape.from_output(out)
        assert len(tape) == 3
        assert [fn.seq for fn in tape.nodes] == sorted(fn.seq for fn in tape.nodes)

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng, 3)
        with no_grad():
            assert not grad_enabled()
            y = x * 2.0
        assert grad_enabled()
        assert y.creator is None and not y.requires_grad

    def test_gradients_accumulate_across_backward_calls(self):
        x = Tensor([1.0], requires_grad=True)
        (x * 3.0).backward()
        (x * 3.0).backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_seed_gradient_shape_checked(self, rng):
        x = leaf(rng, 3)
        with pytest.raises(ShapeError):
            (x * 2.0).backward(np.ones(4))

    def test_recording_leaves_forward_values_unchanged(self, rng):
        x = rng.uniform(-1, 1, size=(5, 3))
        w = rng.uniform(-1, 1, size=(3, 4))
        b = rng.uniform(-1, 1, size=4)

        def forward(requires_grad):
            args = [Tensor(a, requires_grad=requires_grad) for a in (x, w, b)]
            return softmax(sine(linear(*args), 2.0), axis=1)

        recorded, plain = forward(True), forward(False)
        assert recorded.creator is not None and plain.creator is None
        np.testing.assert_array_equal(recorded.data, plain.data)

    def test_backward_is_linear_in_the_seed(self, rng):
        x0 = rng.uniform(-1, 1, size=(3, 4))
        w = Tensor(rng.uniform(-1, 1, size=(4,)))
        seed_a = rng.normal(size=(3, 4))
        seed_b = rng.normal(size=(3, 4))

        def grad_for(seed):
            x = Tensor(x0, requires_grad=True)
            sigmoid(sine(x * w) * x).backward(seed)
            return x.grad.astype(np.float64)

        np.testing.assert_allclose(grad_for(2.0 * seed_a), 2.0 * grad_for(seed_a), rtol=1e-6)
        np.testing.assert_allclose(grad_for(seed_a + seed_b), grad_for(seed_a) + grad_for(seed_b),
                                   rtol=1e-4, atol=1e-6)


class TestOptimizer:
    def test_adam_first_step_moves_by_lr(self):
        params = ParameterStore()
        w = params.add("w", np.array([1.0, -1.0], dtype=np.float32))
        (w * Tensor([2.0, -3.0])).sum().backward()
        adam_step(params, AdamState(lr=0.1))
        # bias-corrected first step is lr * sign(grad)
        np.testing.assert_allclose(w.data, [0.9, -0.9], atol=1e-6)
        np.testing.assert_allclose(w.grad, [0.0, 0.0])

    def test_adam_minimizes_quadratic(self):
        params = ParameterStore()
        w = params.add("w", np.array([3.0], dtype=np.float32))
        state = AdamState(lr=0.05)
        for _ in range(500):
            ((w - 1.0) * (w - 1.0)).sum().backward()
            adam_step(params, state)
        assert abs(float(w.data[0]) - 1.0) < 0.1

    def test_missing_gradient_names_parameter(self):
        params = ParameterStore()
        params.add("layer.w", np.ones(2, dtype=np.float32))
        with pytest.raises(MissingGradientError, match="layer.w"):
            adam_step(params, AdamState())

    def test_frozen_parameters_untouched(self):
        params = ParameterStore()
        w = params.add("w", np.ones(2, dtype=np.float32))
        frozen = params.add("B", np.ones(2, dtype=np.float32), trainable=False)
        (w * frozen).sum().backward()
        adam_step(params, AdamState(lr=0.5))
        np.testing.assert_array_equal(frozen.data, [1.0, 1.0])
        assert frozen.grad is None

    def test_state_round_trip(self):
        params = ParameterStore()
        w = params.add("w", np.ones(3, dtype=np.float32))
        state = AdamState(lr=0.01)
        (w * w).sum().backward()
        adam_step(params, state)
        restored = AdamState(lr=0.01)
        restored.load_arrays(state.to_arrays())
        assert restored.t == 1
        np.testing.assert_array_equal(restored.m["w"], state.m["w"])
        np.testing.assert_array_equal(restored.v["w"], state.v["w"])


class TestParameterStore:
    def test_duplicate_name_rejected(self):
        params = ParameterStore()
        params.add("a", np.zeros(1))
        with pytest.raises(KeyError):
            params.add("a", np.zeros(1))

    def test_load_arrays_checks_names_and_shapes(self):
        params = ParameterStore()
        params.add("a", np.zeros((2, 2)))
        with pytest.raises(KeyError):
            params.load_arrays({})
        with pytest.raises(ShapeError):
            params.load_arrays({"a": np.zeros(3)})
        params.load_arrays({"a": np.ones((2, 2))})
        np.testing.assert_array_equal(params["a"].data, np.ones((2, 2)))

    def test_freeze_and_counts(self):
        params = ParameterStore()
        params.add("a", np.zeros((2, 3)))
        params.add("b", np.zeros(4), trainable=False)
        assert params.num_values() == 10
        assert [n for n, _ in params.trainable()] == ["a"]
        params.freeze()
        assert params.trainable() == []

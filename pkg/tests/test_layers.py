import math

import numpy as np
import pytest

from dpsnn import ContractViolationError, StructuralError
from dpsnn import (
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    group_norm_backward,
    group_norm_forward,
    instance_norm_backward,
    instance_norm_forward,
    output_loss,
    pool_avg_backward,
    pool_avg_forward,
    pool_max_backward,
    pool_max_forward,
    tep_backward,
    tep_forward,
)
from dpsnn._layers import NORM_EPS, global_avg_pool_backward, global_avg_pool_forward

TOLERANCE = 1e-4

CONV_CASES = [
    # (batch, c_in, c_out, size, kernel, stride, padding)
    (1, 1, 1, 4, 3, 1, 1),
    (2, 2, 3, 5, 3, 1, 0),
    (1, 3, 2, 6, 2, 2, 0),
    (2, 1, 4, 7, 3, 2, 1),
    (1, 2, 2, 5, 1, 1, 0),
    (3, 2, 2, 4, 4, 1, 0),
    (1, 1, 3, 6, 3, 3, 1),
]


class TestConvolution:
    def test_identity_kernel(self, rng: np.random.Generator) -> None:
        x = rng.normal(size=(2, 3, 5, 5))
        kernel = np.eye(3).reshape(3, 3, 1, 1)

        out, _ = conv2d_forward(x, kernel, np.zeros(3))

        np.testing.assert_allclose(out, x)

    def test_zero_input_gives_bias(self, rng: np.random.Generator) -> None:
        bias = rng.normal(size=4)

        out, _ = conv2d_forward(np.zeros((1, 2, 6, 6)), rng.normal(size=(4, 2, 3, 3)), bias)

        assert out.shape == (1, 4, 4, 4)
        np.testing.assert_allclose(out, np.broadcast_to(bias[None, :, None, None], out.shape))

    def test_output_size(self, rng: np.random.Generator) -> None:
        out, _ = conv2d_forward(rng.normal(size=(1, 1, 28, 28)), rng.normal(size=(32, 1, 7, 7)), np.zeros(32))
        assert out.shape == (1, 32, 22, 22)

        out, _ = conv2d_forward(rng.normal(size=(1, 1, 9, 9)), rng.normal(size=(1, 1, 3, 3)), np.zeros(1), 2, 1)
        assert out.shape == (1, 1, 5, 5)

    def test_channel_mismatch(self, rng: np.random.Generator) -> None:
        with pytest.raises(StructuralError, match='input channels'):
            conv2d_forward(rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(1, 3, 3, 3)), np.zeros(1))

        with pytest.raises(StructuralError, match='does not fit'):
            conv2d_forward(rng.normal(size=(1, 1, 2, 2)), rng.normal(size=(1, 1, 3, 3)), np.zeros(1))

    @pytest.mark.parametrize('case', CONV_CASES)
    def test_gradients_match_finite_differences(self, case: tuple[int, ...], gradient_checker) -> None:
        batch, c_in, c_out, size, k, stride, padding = case
        rng = gradient_checker.rng
        x = rng.normal(size=(batch, c_in, size, size))
        kernel = rng.normal(size=(c_out, c_in, k, k))
        bias = rng.normal(size=c_out)

        out, cache = conv2d_forward(x, kernel, bias, stride, padding)
        upstream = rng.normal(size=out.shape)
        grad_x, grad_kernel, grad_bias = conv2d_backward(upstream, cache)

        def loss_x(v: np.ndarray) -> float:
            return float(np.sum(conv2d_forward(v, kernel, bias, stride, padding)[0] * upstream))

        def loss_kernel(v: np.ndarray) -> float:
            return float(np.sum(conv2d_forward(x, v, bias, stride, padding)[0] * upstream))

        def loss_bias(v: np.ndarray) -> float:
            return float(np.sum(conv2d_forward(x, kernel, v, stride, padding)[0] * upstream))

        assert gradient_checker.relative(grad_x, gradient_checker.numeric(loss_x, x.copy())) <= TOLERANCE
        assert gradient_checker.relative(grad_kernel, gradient_checker.numeric(loss_kernel, kernel.copy())) <= TOLERANCE
        assert gradient_checker.relative(grad_bias, gradient_checker.numeric(loss_bias, bias.copy())) <= TOLERANCE

    def test_per_example_gradients_sum_to_batch_gradient(self, rng: np.random.Generator) -> None:
        x = rng.normal(size=(4, 2, 5, 5))
        out, cache = conv2d_forward(x, rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), 1, 1)
        upstream = rng.normal(size=out.shape)

        _, batch_kernel, batch_bias = conv2d_backward(upstream, cache)
        none, per_kernel, per_bias = conv2d_backward(upstream, cache, per_example=True, need_input_grad=False)

        assert none is None
        assert per_kernel.shape == (4, 3, 2, 3, 3)
        np.testing.assert_allclose(per_kernel.sum(axis=0), batch_kernel, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(per_bias.sum(axis=0), batch_bias, rtol=1e-10, atol=1e-12)


class TestNormalization:
    def test_group_norm_constant_input(self) -> None:
        out, _ = group_norm_forward(np.full((2, 4, 3, 3), 7.0), np.ones(4), np.zeros(4), 2)

        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_group_norm_statistics(self, rng: np.random.Generator) -> None:
        x = 10.0 * rng.normal(size=(3, 8, 4, 4))

        out, _ = group_norm_forward(x, np.ones(8), np.zeros(8), 4)
        grouped = out.reshape(3, 4, -1)

        np.testing.assert_allclose(grouped.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(grouped.var(axis=-1), 1.0, atol=1e-5)

    def test_group_norm_divisibility(self, rng: np.random.Generator) -> None:
        with pytest.raises(StructuralError, match='groups'):
            group_norm_forward(rng.normal(size=(1, 6, 2, 2)), np.ones(6), np.zeros(6), 4)

    @pytest.mark.parametrize(('shape', 'groups'), [((2, 4, 3, 3), 2), ((1, 6, 2, 3), 3), ((3, 4, 2, 2), 1)])
    def test_group_norm_gradients(self, shape: tuple[int, ...], groups: int, gradient_checker) -> None:
        rng = gradient_checker.rng
        x = rng.normal(size=shape)
        scale, shift = rng.normal(size=shape[1]), rng.normal(size=shape[1])
        out, cache = group_norm_forward(x, scale, shift, groups)
        upstream = rng.normal(size=out.shape)
        grad_x, grad_scale, grad_shift = group_norm_backward(upstream, cache)

        def loss(v: np.ndarray, which: str) -> float:
            args = {'x': x, 'scale': scale, 'shift': shift} | {which: v}
            return float(np.sum(group_norm_forward(args['x'], args['scale'], args['shift'], groups)[0] * upstream))

        for analytic, which, value in ((grad_x, 'x', x), (grad_scale, 'scale', scale), (grad_shift, 'shift', shift)):
            numeric = gradient_checker.numeric(lambda v, w=which: loss(v, w), value.copy())
            assert gradient_checker.relative(analytic, numeric) <= TOLERANCE

    def test_group_norm_per_example(self, rng: np.random.Generator) -> None:
        x = rng.normal(size=(3, 4, 2, 2))
        out, cache = group_norm_forward(x, rng.normal(size=4), rng.normal(size=4), 2)
        upstream = rng.normal(size=out.shape)

        _, scale, shift = group_norm_backward(upstream, cache)
        _, per_scale, per_shift = group_norm_backward(upstream, cache, per_example=True)

        assert per_scale.shape == (3, 4)
        np.testing.assert_allclose(per_scale.sum(axis=0), scale)
        np.testing.assert_allclose(per_shift.sum(axis=0), shift)

    def test_instance_norm_constant_channel(self) -> None:
        x = np.stack([np.full((3, 3), 2.0), np.arange(9.0).reshape(3, 3)])[None]

        out, _ = instance_norm_forward(x)

        np.testing.assert_allclose(out[0, 0], 0.0, atol=1e-12)
        assert out[0, 1].mean() == pytest.approx(0.0, abs=1e-5)

    @pytest.mark.parametrize('shape', [(2, 3, 3, 3), (1, 2, 4, 2), (3, 1, 2, 2)])
    def test_instance_norm_gradients(self, shape: tuple[int, ...], gradient_checker) -> None:
        x = gradient_checker.rng.normal(size=shape)
        _, cache = instance_norm_forward(x)

        error = gradient_checker.error(
            lambda v: instance_norm_forward(v)[0],
            x.copy(),
            lambda upstream: instance_norm_backward(upstream, cache),
        )

        assert error <= TOLERANCE


class TestPooling:
    def test_max_pool_binary_window(self) -> None:
        x = np.array([[[[0.0, 1.0], [0.0, 0.0]]]])

        out, _ = pool_max_forward(x, 2)

        assert out.item() == 1.0

    def test_max_pool_is_or_on_spikes(self, rng: np.random.Generator) -> None:
        spikes = (rng.random((3, 2, 6, 6)) < 0.3).astype(np.float64)

        out, _ = pool_max_forward(spikes, 2)
        windows = spikes.reshape(3, 2, 3, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5).reshape(3, 2, 3, 3, 4)

        np.testing.assert_array_equal(out, np.any(windows == 1.0, axis=-1).astype(np.float64))

    def test_avg_pool_half(self) -> None:
        out, _ = pool_avg_forward(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]), 2)

        assert out.item() == 0.5

    def test_max_pool_tie_break(self) -> None:
        x = np.ones((1, 1, 2, 2))
        out, cache = pool_max_forward(x, 2)

        grad = pool_max_backward(np.ones_like(out), cache)

        np.testing.assert_array_equal(grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_max_backward_needs_max_cache(self) -> None:
        out, cache = pool_avg_forward(np.zeros((1, 1, 4, 4)), 2)

        with pytest.raises(StructuralError, match='pool_max_forward'):
            pool_max_backward(np.ones_like(out), cache)

    def test_kernel_larger_than_input(self) -> None:
        with pytest.raises(StructuralError, match='exceeds'):
            pool_avg_forward(np.zeros((1, 1, 3, 3)), 4)

    def test_output_size_without_padding(self) -> None:
        out, _ = pool_avg_forward(np.zeros((1, 1, 22, 22)), 2)
        assert out.shape == (1, 1, 11, 11)

        out, _ = pool_max_forward(np.zeros((1, 1, 32, 32)), 5)
        assert out.shape == (1, 1, 14, 14)

    @pytest.mark.parametrize(
        ('shape', 'kernel', 'stride'), [((2, 2, 6, 6), 2, 2), ((1, 3, 7, 7), 3, 2), ((1, 1, 5, 5), 5, 2)]
    )
    def test_avg_pool_gradients(self, shape: tuple[int, ...], kernel: int, stride: int, gradient_checker) -> None:
        x = gradient_checker.rng.normal(size=shape)
        _, cache = pool_avg_forward(x, kernel, stride)

        error = gradient_checker.error(
            lambda v: pool_avg_forward(v, kernel, stride)[0],
            x.copy(),
            lambda upstream: pool_avg_backward(upstream, cache),
        )

        assert error <= TOLERANCE

    @pytest.mark.parametrize(('shape', 'kernel'), [((2, 2, 6, 6), 2), ((1, 2, 7, 7), 3)])
    def test_max_pool_gradients_off_ties(self, shape: tuple[int, ...], kernel: int, gradient_checker) -> None:
        # distinct values spaced far wider than the difference step, so no argmax moves
        x = gradient_checker.rng.permutation(math.prod(shape)).reshape(shape).astype(np.float64) * 0.1
        _, cache = pool_max_forward(x, kernel)

        error = gradient_checker.error(
            lambda v: pool_max_forward(v, kernel)[0],
            x.copy(),
            lambda upstream: pool_max_backward(upstream, cache),
        )

        assert error <= TOLERANCE

    def test_global_pool(self, rng: np.random.Generator) -> None:
        x = rng.normal(size=(2, 3, 4, 4))
        out, shape = global_avg_pool_forward(x)
        upstream = rng.normal(size=out.shape)

        np.testing.assert_allclose(out, x.mean(axis=(2, 3)))
        grad = global_avg_pool_backward(upstream, shape)
        np.testing.assert_allclose(grad.sum(axis=(2, 3)), upstream)


class TestTemporalEnhancedPooling:
    def test_degenerates_to_avg_pool_for_constant_fire_rate(self, rng: np.random.Generator) -> None:
        time_steps = 4
        # every neuron fires exactly once, at a random step, so the fire rate is constant
        fire_at = rng.integers(0, time_steps, size=(2, 3, 6, 6))
        spikes = (np.arange(time_steps)[:, None, None, None, None] == fire_at[None]).astype(np.float64)

        out, _ = tep_forward(spikes, 2)
        expected, _ = pool_avg_forward(spikes.reshape(-1, 3, 6, 6), 2)

        np.testing.assert_allclose(out, expected.reshape(out.shape), atol=1e-5)

    def test_all_firing_equals_avg_pool(self) -> None:
        spikes = np.ones((3, 1, 2, 4, 4))

        out, _ = tep_forward(spikes, 2)

        np.testing.assert_allclose(out, 1.0, atol=1e-5)

    def test_hand_evaluation(self) -> None:
        spikes = np.zeros((2, 1, 1, 2, 2))
        spikes[:, 0, 0, 0, 0] = 1.0

        out, _ = tep_forward(spikes, 2)

        fire_rate = np.array([1.0, 0.0, 0.0, 0.0])
        normalized = (fire_rate - fire_rate.mean()) / math.sqrt(fire_rate.var() + NORM_EPS)
        expected = (1.0 + normalized[0]) / 4.0
        np.testing.assert_allclose(out.reshape(2), [expected, expected], rtol=1e-12)

    def test_rejects_non_binary_and_empty_input(self) -> None:
        with pytest.raises(ContractViolationError, match='binary'):
            tep_forward(np.full((2, 1, 1, 2, 2), 0.5), 2)

        with pytest.raises(StructuralError):
            tep_forward(np.zeros((0, 1, 1, 2, 2)), 2)

    @pytest.mark.parametrize('shape', [(2, 1, 2, 4, 4), (3, 2, 1, 5, 5), (4, 1, 1, 6, 6)])
    def test_gradients_on_relaxed_input(self, shape: tuple[int, ...], gradient_checker) -> None:
        x = gradient_checker.rng.uniform(0.0, 1.0, size=shape)
        _, cache = tep_forward(x, 2, check_binary=False)

        error = gradient_checker.error(
            lambda v: tep_forward(v, 2, check_binary=False)[0],
            x.copy(),
            lambda upstream: tep_backward(upstream, cache),
        )

        assert error <= TOLERANCE


class TestDenseAndLoss:
    def test_identity_and_bias(self, rng: np.random.Generator) -> None:
        x = rng.normal(size=(3, 5))

        out, _ = dense_forward(x, np.eye(5), np.zeros(5))
        np.testing.assert_allclose(out, x)

        bias = rng.normal(size=4)
        out, _ = dense_forward(np.zeros((2, 5)), rng.normal(size=(4, 5)), bias)
        np.testing.assert_allclose(out, np.broadcast_to(bias, (2, 4)))

    def test_width_mismatch(self, rng: np.random.Generator) -> None:
        with pytest.raises(StructuralError, match='width'):
            dense_forward(rng.normal(size=(1, 3)), rng.normal(size=(2, 4)), np.zeros(2))

    @pytest.mark.parametrize(('batch', 'd_in', 'd_out'), [(1, 3, 2), (4, 5, 10), (2, 7, 3)])
    def test_gradients(self, batch: int, d_in: int, d_out: int, gradient_checker) -> None:
        rng = gradient_checker.rng
        x, weight, bias = rng.normal(size=(batch, d_in)), rng.normal(size=(d_out, d_in)), rng.normal(size=d_out)
        out, cached = dense_forward(x, weight, bias)
        upstream = rng.normal(size=out.shape)
        grad_x, grad_weight, _ = dense_backward(upstream, cached, weight)
        _, per_weight, per_bias = dense_backward(upstream, cached, weight, per_example=True)

        numeric_x = gradient_checker.numeric(
            lambda v: float(np.sum(dense_forward(v, weight, bias)[0] * upstream)), x.copy()
        )
        numeric_w = gradient_checker.numeric(
            lambda v: float(np.sum(dense_forward(x, v, bias)[0] * upstream)), weight.copy()
        )

        assert gradient_checker.relative(grad_x, numeric_x) <= TOLERANCE
        assert gradient_checker.relative(grad_weight, numeric_w) <= TOLERANCE
        np.testing.assert_allclose(per_weight.sum(axis=0), grad_weight)
        np.testing.assert_allclose(per_bias.sum(axis=0), upstream.sum(axis=0))

    def test_uniform_logits(self) -> None:
        loss, grad = output_loss(np.full(10, 3.0), 10, 4)

        assert loss == pytest.approx(math.log(10))
        assert grad.sum() == pytest.approx(0.0, abs=1e-6)
        assert grad[4] == pytest.approx(0.1 - 1.0)

    def test_confident_logit(self) -> None:
        potentials = np.zeros(10)
        potentials[2] = 1e4

        loss, _ = output_loss(potentials, 10, 2)

        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_batched_loss(self, rng: np.random.Generator) -> None:
        potentials = rng.normal(size=(5, 10)) * 10
        labels = rng.integers(0, 10, size=5)

        losses, grads = output_loss(potentials, 10, labels)

        assert losses.shape == (5,)
        np.testing.assert_allclose(grads.sum(axis=1), 0.0, atol=1e-6)
        for i in range(5):
            loss, grad = output_loss(potentials[i], 10, labels[i])
            assert loss == pytest.approx(losses[i])
            np.testing.assert_allclose(grad, grads[i])

    def test_label_out_of_range(self) -> None:
        with pytest.raises(StructuralError, match='out of range'):
            output_loss(np.zeros(10), 10, 10)


def _agrees(checker, loss, value: np.ndarray, analytic: np.ndarray) -> bool:
    return checker.relative(analytic, checker.numeric(loss, value.copy())) <= TOLERANCE


class TestRandomGeometries:
    """Finite-difference checks of every differentiable kernel over twenty seeded random shapes each."""

    @pytest.mark.parametrize('draw', range(20))
    def test_conv2d(self, draw: int, gradient_checker) -> None:
        geometry = np.random.default_rng(draw)
        k, stride, padding = int(geometry.integers(1, 4)), int(geometry.integers(1, 3)), int(geometry.integers(0, 2))
        batch, c_in, c_out = (int(v) for v in geometry.integers(1, 4, size=3))
        size = int(geometry.integers(k, k + 4))
        rng = gradient_checker.rng
        args = [rng.normal(size=(batch, c_in, size, size)), rng.normal(size=(c_out, c_in, k, k))]
        args.append(rng.normal(size=c_out))

        out, cache = conv2d_forward(*args, stride, padding)
        upstream = rng.normal(size=out.shape)
        grads = conv2d_backward(upstream, cache)

        for position, analytic in enumerate(grads):

            def loss(v: np.ndarray, position: int = position) -> float:
                varied = [v if i == position else a for i, a in enumerate(args)]
                return float(np.sum(conv2d_forward(*varied, stride, padding)[0] * upstream))

            assert _agrees(gradient_checker, loss, args[position], analytic)

    @pytest.mark.parametrize('draw', range(20))
    def test_group_norm(self, draw: int, gradient_checker) -> None:
        geometry = np.random.default_rng(100 + draw)
        groups = int(geometry.integers(1, 4))
        shape = (
            int(geometry.integers(1, 4)),
            groups * int(geometry.integers(1, 3)),
            int(geometry.integers(2, 5)),
            int(geometry.integers(3, 5)),
        )
        rng = gradient_checker.rng
        args = [2.0 * rng.normal(size=shape), rng.normal(size=shape[1]), rng.normal(size=shape[1])]

        out, cache = group_norm_forward(*args, groups)
        upstream = rng.normal(size=out.shape)
        grads = group_norm_backward(upstream, cache)

        for position, analytic in enumerate(grads):

            def loss(v: np.ndarray, position: int = position) -> float:
                varied = [v if i == position else a for i, a in enumerate(args)]
                return float(np.sum(group_norm_forward(*varied, groups)[0] * upstream))

            assert _agrees(gradient_checker, loss, args[position], analytic)

    @pytest.mark.parametrize('draw', range(20))
    def test_instance_norm(self, draw: int, gradient_checker) -> None:
        geometry = np.random.default_rng(200 + draw)
        shape = tuple(int(v) for v in geometry.integers((1, 1, 2, 3), (4, 4, 5, 5)))
        x = 2.0 * gradient_checker.rng.normal(size=shape)
        _, cache = instance_norm_forward(x)

        error = gradient_checker.error(
            lambda v: instance_norm_forward(v)[0], x.copy(), lambda upstream: instance_norm_backward(upstream, cache)
        )

        assert error <= TOLERANCE

    @pytest.mark.parametrize('draw', range(20))
    def test_dense(self, draw: int, gradient_checker) -> None:
        geometry = np.random.default_rng(300 + draw)
        batch, d_in, d_out = (int(v) for v in geometry.integers((1, 1, 1), (5, 9, 11)))
        rng = gradient_checker.rng
        x, weight, bias = rng.normal(size=(batch, d_in)), rng.normal(size=(d_out, d_in)), rng.normal(size=d_out)

        out, cached = dense_forward(x, weight, bias)
        upstream = rng.normal(size=out.shape)
        grad_x, grad_weight, grad_bias = dense_backward(upstream, cached, weight)

        assert _agrees(
            gradient_checker, lambda v: float(np.sum(dense_forward(v, weight, bias)[0] * upstream)), x, grad_x
        )
        assert _agrees(
            gradient_checker, lambda v: float(np.sum(dense_forward(x, v, bias)[0] * upstream)), weight, grad_weight
        )
        assert _agrees(
            gradient_checker, lambda v: float(np.sum(dense_forward(x, weight, v)[0] * upstream)), bias, grad_bias
        )

    @pytest.mark.parametrize('draw', range(20))
    def test_pool_avg(self, draw: int, gradient_checker) -> None:
        geometry = np.random.default_rng(400 + draw)
        kernel, stride = int(geometry.integers(1, 4)), int(geometry.integers(1, 4))
        shape = (
            int(geometry.integers(1, 3)),
            int(geometry.integers(1, 4)),
            int(geometry.integers(kernel, kernel + 5)),
            int(geometry.integers(kernel, kernel + 5)),
        )
        x = gradient_checker.rng.normal(size=shape)
        _, cache = pool_avg_forward(x, kernel, stride)

        error = gradient_checker.error(
            lambda v: pool_avg_forward(v, kernel, stride)[0],
            x.copy(),
            lambda upstream: pool_avg_backward(upstream, cache),
        )

        assert error <= TOLERANCE

    @pytest.mark.parametrize('draw', range(20))
    def test_tep(self, draw: int, gradient_checker) -> None:
        geometry = np.random.default_rng(500 + draw)
        kernel, stride = int(geometry.integers(2, 4)), int(geometry.integers(1, 3))
        shape = (
            int(geometry.integers(2, 5)),
            int(geometry.integers(1, 3)),
            int(geometry.integers(1, 3)),
            int(geometry.integers(4, 7)),
            int(geometry.integers(4, 7)),
        )
        x = gradient_checker.rng.uniform(0.0, 1.0, size=shape)
        _, cache = tep_forward(x, kernel, stride, check_binary=False)

        error = gradient_checker.error(
            lambda v: tep_forward(v, kernel, stride, check_binary=False)[0],
            x.copy(),
            lambda upstream: tep_backward(upstream, cache),
        )

        assert error <= TOLERANCE

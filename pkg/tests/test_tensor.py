"""Tensor core: kernel oracles, gradient checks, spike semantics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikefuse.errors import NumericError, ParameterError, ShapeError, StateError
from spikefuse.rng import Rng
from spikefuse.tensor import (
    BatchNormState,
    Tensor,
    avgpool2d,
    batchnorm,
    conv2d,
    dropout,
    hadamard,
    kaiming_uniform,
    linear,
    no_grad,
    relu,
    set_debug_nan,
    sigmoid,
    smooth_spike,
    spike,
    stack,
    tmean,
    tsum,
)

from oracles import avgpool_loops, conv2d_loops, fd_gradient, linear_loops, rel_err, surrogate_slope, surrogate_value


def rand(shape, seed, dtype=np.float64, scale=1.0):
    return Rng(seed).normal(0.0, scale, size=shape).astype(dtype)


class TestConv2d:
    def test_ones_kernel_sums_window(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, w, b, stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_gesture_input_layer_shape(self):
        # 128x128, 5x5 kernel, stride 2, same padding -> 64x64
        x = Tensor(np.zeros((1, 2, 128, 128), dtype=np.float32))
        w = Tensor(np.zeros((128, 2, 5, 5), dtype=np.float32))
        b = Tensor(np.zeros(128, dtype=np.float32))
        out = conv2d(x, w, b, stride=2, padding=2)
        assert out.shape == (1, 128, 64, 64)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        x = rand((1, 2, 4, 4), seed)
        w = rand((3, 2, 3, 3), seed + 100)
        b = rand((3,), seed + 200)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
        ref = conv2d_loops(x, w, b, stride=1, padding=1)
        assert np.max(np.abs(out.data - ref)) < 1e-12

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 2), (3, 0)])
    def test_stride_padding_grid_vs_oracle(self, stride, padding):
        x = rand((2, 3, 7, 8), 7 + stride)
        w = rand((4, 3, 3, 3), 8 + padding)
        b = rand((4,), 9)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        ref = conv2d_loops(x, w, b, stride=stride, padding=padding)
        assert np.max(np.abs(out.data - ref)) < 1e-12

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 2, 3, 3)))
        with pytest.raises(ShapeError):
            conv2d(x, w, None, 1, 1)

    def test_gradients_match_fd(self):
        x = Tensor(rand((2, 2, 5, 5), 1), requires_grad=True)
        w = Tensor(rand((3, 2, 3, 3), 2), requires_grad=True)
        b = Tensor(rand((3,), 3), requires_grad=True)

        def loss_fn():
            return float((conv2d(x, w, b, stride=2, padding=1).data ** 2).sum() / 2)

        out = conv2d(x, w, b, stride=2, padding=1)
        tsum(out * out * 0.5).backward()
        for t in (x, w, b):
            fd = fd_gradient(loss_fn, t.data)
            assert rel_err(t.grad, fd).max() < 1e-5


class TestLinear:
    def test_identity(self):
        out = linear(Tensor([[3.0, 5.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [[3.0, 5.0]])

    def test_half_weights_and_bias(self):
        out = linear(
            Tensor([[1.0, 1.0, 1.0, 1.0]]), Tensor(np.full((1, 4), 0.5)), Tensor([1.0])
        )
        assert out.data[0, 0] == pytest.approx(3.0)

    def test_matches_matmul_oracle(self):
        x = rand((2, 8), 5)
        w = rand((3, 8), 6)
        b = rand((3,), 7)
        out = linear(Tensor(x), Tensor(w), Tensor(b))
        assert np.max(np.abs(out.data - linear_loops(x, w, b))) < 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), None)

    def test_gradients_match_fd(self):
        x = Tensor(rand((3, 4), 11), requires_grad=True)
        w = Tensor(rand((2, 4), 12), requires_grad=True)
        b = Tensor(rand((2,), 13), requires_grad=True)

        def loss_fn():
            return float((linear(x, w, b).data ** 2).sum())

        out = linear(x, w, b)
        tsum(out * out).backward()
        for t in (x, w, b):
            assert rel_err(t.grad, fd_gradient(loss_fn, t.data)).max() < 1e-5


class TestAvgPool:
    def test_block_mean(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert avgpool2d(x, 2).item() == pytest.approx(2.5)

    def test_constant_preserved(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.25))
        assert np.allclose(avgpool2d(x, 2).data, 3.25)

    def test_matches_loop_oracle(self):
        x = rand((1, 1, 4, 4), 21)
        out = avgpool2d(Tensor(x), 2)
        assert np.max(np.abs(out.data - avgpool_loops(x, 2))) < 1e-12

    def test_indivisible_raises(self):
        with pytest.raises(ShapeError):
            avgpool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)

    def test_gradient(self):
        x = Tensor(rand((1, 2, 4, 4), 22), requires_grad=True)

        def loss_fn():
            return float((avgpool2d(x, 2).data ** 2).sum())

        out = avgpool2d(x, 2)
        tsum(out * out).backward()
        assert rel_err(x.grad, fd_gradient(loss_fn, x.data)).max() < 1e-5


class TestBatchNorm:
    def test_already_normalized_is_identity(self):
        rng = Rng(31)
        x = rng.normal(0, 1, size=(8, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        state = BatchNormState(3, np.float64)
        out = batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), state, True)
        assert np.max(np.abs(out.data - x)) < 1e-4  # eps-term tolerance

    def test_zero_gamma_gives_beta(self):
        x = rand((2, 3, 4, 4), 32)
        beta = np.array([1.0, -2.0, 0.5])
        out = batchnorm(Tensor(x), Tensor(np.zeros(3)), Tensor(beta), BatchNormState(3, np.float64), True)
        assert np.allclose(out.data, beta[None, :, None, None] * np.ones_like(x))

    def test_train_statistics(self):
        # Input variance large enough that the eps=1e-5 term is negligible.
        x = rand((16, 4, 6, 6), 33, scale=20.0)
        out = batchnorm(
            Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), BatchNormState(4, np.float64), True
        ).data
        assert np.max(np.abs(out.mean(axis=(0, 2, 3)))) < 1e-10
        assert np.max(np.abs(out.var(axis=(0, 2, 3)) - 1.0)) < 1e-6

    def test_eval_before_stats_raises(self):
        with pytest.raises(StateError):
            batchnorm(
                Tensor(np.zeros((1, 2, 2, 2))),
                Tensor(np.ones(2)),
                Tensor(np.zeros(2)),
                BatchNormState(2),
                False,
            )

    def test_eval_uses_running_stats(self):
        state = BatchNormState(2, np.float64)
        x_train = rand((8, 2, 3, 3), 34)
        batchnorm(Tensor(x_train), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)
        assert state.initialized
        x = rand((4, 2, 3, 3), 35)
        out = batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, False)
        expect = (x - state.mean[None, :, None, None]) / np.sqrt(
            state.var[None, :, None, None] + 1e-5
        )
        assert np.allclose(out.data, expect)

    def test_gradients_match_fd(self):
        x = Tensor(rand((4, 2, 3, 3), 36), requires_grad=True)
        gamma = Tensor(rand((2,), 37) + 1.0, requires_grad=True)
        beta = Tensor(rand((2,), 38), requires_grad=True)
        # Random output weighting so the loss is not invariant to x (a plain
        # sum of squared normalized values nearly is).
        r = Tensor(rand((4, 2, 3, 3), 39))

        def loss_fn():
            state = BatchNormState(2, np.float64)
            out = batchnorm(x, gamma, beta, state, True).data * r.data
            return float((out**2).sum())

        out = batchnorm(x, gamma, beta, BatchNormState(2, np.float64), True) * r
        tsum(out * out).backward()
        for t in (x, gamma, beta):
            assert rel_err(t.grad, fd_gradient(loss_fn, t.data)).max() < 1e-4


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor([0.0])).item() == pytest.approx(0.5)

    def test_relu_negative(self):
        assert relu(Tensor([-2.0])).item() == 0.0

    def test_hadamard_broadcast_channel_shapes(self):
        # (C,1,1) against (1,H,W) must broadcast to (C,H,W)
        a = Tensor(np.full((1, 1, 1), 2.0))
        b = Tensor(np.ones((1, 2, 2)))
        out = hadamard(a, b)
        assert out.shape == (1, 2, 2)
        assert np.all(out.data == 2.0)

    def test_hadamard_rejects_incompatible(self):
        with pytest.raises(ShapeError):
            hadamard(Tensor(np.zeros((3, 1))), Tensor(np.zeros((2, 4, 5))))

    @given(
        st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1)
    )
    @settings(max_examples=30, deadline=None)
    def test_hadamard_commutes(self, c, hw, seed):
        a = Rng(seed).normal(size=(c, 1, 1))
        b = Rng(seed + 1).normal(size=(1, hw, hw))
        ab = hadamard(Tensor(a), Tensor(b)).data
        ba = hadamard(Tensor(b), Tensor(a)).data
        assert np.array_equal(ab, ba)

    def test_sigmoid_gradient(self):
        x = Tensor(rand((5,), 41), requires_grad=True)

        def loss_fn():
            return float(sigmoid(x).data.sum())

        tsum(sigmoid(x)).backward()
        assert rel_err(x.grad, fd_gradient(loss_fn, x.data)).max() < 1e-5


class TestSpike:
    def test_above_threshold_fires(self):
        assert spike(Tensor([1.2]), 1.15).item() == 1.0

    def test_at_threshold_fires_with_unit_slope(self):
        v = Tensor([1.15], requires_grad=True)
        s = spike(v, 1.15)
        assert s.item() == 1.0
        tsum(s).backward()
        assert v.grad[0] == pytest.approx(1.0)  # alpha/2 at alpha=2

    def test_far_below_threshold(self):
        v = Tensor([-10.0], requires_grad=True)
        s = spike(v, 0.8)
        assert s.item() == 0.0
        tsum(s).backward()
        assert v.grad[0] < 1e-2
        assert v.grad[0] == pytest.approx(surrogate_slope(-10.0, 0.8))

    @given(st.integers(0, 2**31 - 1), st.integers(1, 64))
    @settings(max_examples=50, deadline=None)
    def test_output_binary_and_counts(self, seed, n):
        v = Rng(seed).normal(0.0, 2.0, size=n)
        out = spike(Tensor(v), 1.15).data
        assert set(np.unique(out)) <= {0.0, 1.0}
        assert out.sum() == np.count_nonzero(v >= 1.15)


class TestSmoothSpike:
    def test_half_at_threshold(self):
        assert smooth_spike(Tensor([0.8]), 0.8).item() == pytest.approx(0.5)

    def test_saturates_toward_one(self):
        assert smooth_spike(Tensor([1e9]), 0.8).item() == pytest.approx(1.0, abs=1e-6)

    def test_value_one_above_threshold(self):
        # alpha=2: g(v_th + 1) = arctan(pi)/pi + 1/2
        expect = math.atan(math.pi) / math.pi + 0.5
        assert smooth_spike(Tensor([1.8]), 0.8).item() == pytest.approx(expect)
        assert surrogate_value(1.8, 0.8) == pytest.approx(expect)

    def test_gradient_is_spike_surrogate(self):
        v = Tensor(rand((7,), 42), requires_grad=True)
        tsum(smooth_spike(v, 0.5)).backward()
        smooth_grad = v.grad.copy()
        v.zero_grad()
        tsum(spike(v, 0.5)).backward()
        assert np.allclose(smooth_grad, v.grad)

        def loss_fn():
            return float(smooth_spike(v, 0.5).data.sum())

        assert rel_err(smooth_grad, fd_gradient(loss_fn, v.data)).max() < 1e-5


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(rand((4, 4), 51))
        out = dropout(x, 0.0, np.ones((4, 4)), training=True)
        assert np.array_equal(out.data, x.data)

    def test_zero_mask_zeroes(self):
        x = Tensor(rand((4, 4), 52))
        out = dropout(x, 0.5, np.zeros((4, 4)), training=True)
        assert np.all(out.data == 0.0)

    def test_eval_identity(self):
        x = Tensor(rand((4, 4), 53))
        assert dropout(x, 0.5, np.zeros((4, 4)), training=False) is x

    def test_bad_rate(self):
        with pytest.raises(ParameterError):
            dropout(Tensor([1.0]), 1.0, np.ones(1))

    def test_mean_preserved_over_masks(self):
        # E[mask / (1-rate)] = 1, so the expectation over many masks matches.
        rng = Rng(54)
        x = np.full(100, 2.0)
        rate = 0.5
        acc = np.zeros_like(x)
        n = 100_000
        masks = rng.random((n, 100)) >= rate
        acc = (masks / (1 - rate)).mean(axis=0) * x
        assert abs(acc.mean() - x.mean()) / x.mean() < 0.01


class TestBackward:
    def test_linear_form(self):
        x = Tensor([1.0, 2.0, 3.0])
        w = Tensor([4.0, 5.0, 6.0], requires_grad=True)
        tsum(hadamard(w, x)).backward()
        assert np.allclose(w.grad, x.data)

    def test_chain_rule_by_hand(self):
        # d/dw sigmoid(w)^2 at w=0: 2 * 0.5 * 0.25 = 0.25
        w = Tensor([0.0], requires_grad=True)
        tsum(sigmoid(w) * sigmoid(w)).backward()
        assert w.grad[0] == pytest.approx(0.25)

    def test_accumulation_is_additive(self):
        w = Tensor([2.0], requires_grad=True)
        loss = tsum(w * w)
        loss.backward()
        first = w.grad.copy()
        loss.backward()
        assert np.allclose(w.grad, 2 * first)
        w.zero_grad()
        assert w.grad is None

    def test_fanout_sums_contributions(self):
        w = Tensor([3.0], requires_grad=True)
        y = w * w + w  # dy/dw = 2w + 1 = 7
        tsum(y).backward()
        assert w.grad[0] == pytest.approx(7.0)

    def test_non_scalar_backward_raises(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0], requires_grad=True).backward()

    def test_random_composition_matches_fd(self):
        x = Tensor(rand((3, 4), 61), requires_grad=True)
        w = Tensor(rand((2, 4), 62), requires_grad=True)

        def compute():
            h = sigmoid(linear(x, w))
            return tsum(h * h) * 0.5

        compute().backward()

        def loss_fn():
            return compute().item()

        for t in (x, w):
            assert rel_err(t.grad, fd_gradient(loss_fn, t.data)).max() < 1e-5

    def test_getitem_stack_reshape_roundtrip_grads(self):
        x = Tensor(rand((3, 2, 2), 63), requires_grad=True)
        parts = [x[i] * float(i + 1) for i in range(3)]
        y = stack(parts, axis=0).reshape(3, 4)
        tsum(y * y).backward()

        def loss_fn():
            vals = np.stack([x.data[i] * (i + 1) for i in range(3)]).reshape(3, 4)
            return float((vals**2).sum())

        assert rel_err(x.grad, fd_gradient(loss_fn, x.data)).max() < 1e-5


class TestDeterminismAndModes:
    def test_fixed_seed_bitwise_repeatable(self):
        def run():
            rng = Rng(99).split("weights")
            w = kaiming_uniform((4, 4), 4, rng, np.float32)
            x = Tensor(Rng(98).normal(size=(2, 4)).astype(np.float32))
            out = linear(x, w)
            loss = tsum(out * out)
            loss.backward()
            return w.data.copy(), w.grad.copy(), loss.item()

        w1, g1, l1 = run()
        w2, g2, l2 = run()
        assert np.array_equal(w1, w2) and np.array_equal(g1, g2) and l1 == l2

    def test_no_grad_blocks_graph(self):
        w = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = w * w
        assert not y.requires_grad

    def test_debug_nan_toggle(self):
        set_debug_nan(True)
        try:
            with np.errstate(divide="ignore"), pytest.raises(NumericError):
                Tensor([1.0]) / Tensor([0.0])
        finally:
            set_debug_nan(False)

    def test_mean_reduction_gradient(self):
        x = Tensor(rand((4, 5), 71), requires_grad=True)

        def loss_fn():
            return float((x.data.mean(axis=1) ** 2).sum())

        m = tmean(x, axis=1)
        tsum(m * m).backward()
        assert rel_err(x.grad, fd_gradient(loss_fn, x.data)).max() < 1e-5

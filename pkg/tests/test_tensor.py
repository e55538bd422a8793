"""Engine unit tests: op values, gradients vs finite differences, training
control, and the documented error conditions."""
import numpy as np
import pytest

import splitnav.tensor as T
from splitnav.errors import ConfigurationError, TrainingFault
from splitnav.tensor import (Adam, AdamState, Tensor, TrainControl, TrainSignal,
                             adam_step, train_control_step)

from gradcheck import assert_gradients_match


def rng():
    return np.random.default_rng(20240811)


class TestOpValues:
    def test_conv_identity_kernel(self):
        r = rng()
        x = Tensor(r.standard_normal((3, 5, 7)).astype(np.float32))
        w = Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
        b = Tensor(np.zeros(3, dtype=np.float32))
        y = T.conv2d(x, w, b, stride=1, padding=0)
        assert np.array_equal(y.data, x.data)

    def test_conv_all_ones_sums_window(self):
        x = Tensor(np.ones((1, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        y = T.conv2d(x, w, b)
        assert y.shape == (1, 1, 1)
        assert y.data[0, 0, 0] == pytest.approx(9.0)

    def test_conv_stride_padding_shapes(self):
        x = Tensor(np.zeros((2, 3, 36, 64), dtype=np.float32))
        w = Tensor(np.zeros((8, 3, 4, 4), dtype=np.float32))
        b = Tensor(np.zeros(8, dtype=np.float32))
        y = T.conv2d(x, w, b, stride=2, padding=1)
        assert y.shape == (2, 8, 18, 32)

    def test_selu_at_one(self):
        y = T.selu(Tensor(np.array(1.0, dtype=np.float32)))
        assert y.item() == pytest.approx(1.05070098, abs=1e-6)

    def test_selu_negative_limit(self):
        y = T.selu(Tensor(np.array(-40.0, dtype=np.float32)))
        assert y.item() == pytest.approx(-T.SELU_LAMBDA * T.SELU_ALPHA, rel=1e-5)

    def test_activation_spot_values(self):
        zero = Tensor(np.array(0.0, dtype=np.float32))
        assert T.sigmoid(zero).item() == pytest.approx(0.5)
        assert T.tanh(zero).item() == 0.0
        assert T.relu(Tensor(np.array(-1.0, dtype=np.float32))).item() == 0.0
        assert T.activation("relu", Tensor(np.array(2.0, dtype=np.float32))).item() == 2.0

    def test_sigmoid_saturates_without_overflow(self):
        y = T.sigmoid(Tensor(np.array([-1e4, 1e4], dtype=np.float32)))
        assert np.isfinite(y.data).all()
        assert y.data[0] == pytest.approx(0.0, abs=1e-20)
        assert y.data[1] == pytest.approx(1.0, abs=1e-20)

    def test_group_norm_normalises_groups(self):
        r = rng()
        x = Tensor(r.standard_normal((8, 6, 5)).astype(np.float32) * 3 + 1)
        gamma = Tensor(np.ones(8, dtype=np.float32))
        beta = Tensor(np.zeros(8, dtype=np.float32))
        y = T.group_norm(x, 4, gamma, beta)
        per_group = y.data.reshape(4, -1)
        assert np.allclose(per_group.mean(axis=1), 0.0, atol=1e-5)
        assert np.allclose(per_group.var(axis=1), 1.0, atol=1e-3)

    def test_linear_matches_matmul(self):
        r = rng()
        x = r.standard_normal((4, 6)).astype(np.float32)
        w = r.standard_normal((3, 6)).astype(np.float32)
        b = r.standard_normal(3).astype(np.float32)
        y = T.linear(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(y.data, x @ w.T + b, atol=1e-6)

    def test_min_pool_partitions(self):
        x = np.arange(1, 17, dtype=np.float32).reshape(4, 4)
        y = T.min_pool2d(x, 2, 2)
        assert np.array_equal(y.data, np.array([[1, 3], [9, 11]], dtype=np.float32))

    def test_min_pool_uneven_partitions_cover_input(self):
        x = np.arange(35, dtype=np.float32).reshape(5, 7)
        y = T.min_pool2d(x, 2, 3)
        # partitions: rows [0,3),[2? no: floor/ceil bounds
        assert y.shape == (2, 3)
        assert y.data[0, 0] == 0.0
        assert y.data[-1, -1] == x[2:, 4:].min()

    def test_upsample_integer_factor_repeats(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
        y = T.upsample_nearest(x, 4, 4)
        assert np.array_equal(y.data[:2, :2], np.ones((2, 2)) * 1.0)
        assert y.data[3, 3] == 4.0

    def test_adaptive_avg_pool_means(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
        y = T.adaptive_avg_pool2d(x, 2, 2)
        assert y.data[0, 0, 0] == pytest.approx(np.mean([0, 1, 4, 5]))
        assert y.data[0, 1, 1] == pytest.approx(np.mean([10, 11, 14, 15]))

    def test_l1_l2_values(self):
        pred = Tensor(np.array([0.0, 2.0], dtype=np.float32))
        target = Tensor(np.array([1.0, 0.0], dtype=np.float32))
        assert T.l1_loss(pred, target).item() == pytest.approx(1.5)
        assert T.l2_loss(pred, target).item() == pytest.approx(2.5)
        assert T.loss("l1", pred, target).item() == pytest.approx(1.5)

    def test_concat_layout(self):
        a = Tensor(np.array([1.0, 2.0], dtype=np.float32))
        b = Tensor(np.array([3.0], dtype=np.float32))
        y = T.concat([a, b])
        assert np.array_equal(y.data, np.array([1, 2, 3], dtype=np.float32))

    def test_forward_determinism(self):
        r = rng()
        x = r.standard_normal((2, 3, 9, 9)).astype(np.float32)
        w = r.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = r.standard_normal(4).astype(np.float32)
        y1 = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1)
        y2 = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1)
        assert np.array_equal(y1.data, y2.data)

    def test_dtype_preserved(self):
        x64 = Tensor(np.ones((2, 2), dtype=np.float64))
        assert T.selu(x64).dtype == np.float64
        assert T.mean(x64).dtype == np.float64
        x32 = Tensor(np.ones((2, 2), dtype=np.float32))
        assert T.sigmoid(x32).dtype == np.float32


class TestAutodiff:
    def test_diamond_fanout_accumulates(self):
        x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        y = T.add(T.relu(x), T.relu(x))
        T.mean(y).backward()
        # d mean(2*relu(x)) / dx = 2/2 * 1{x>0}
        assert np.allclose(x.grad, [1.0, 0.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.relu(x).backward()

    def test_no_grad_skips_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.relu(x)
        assert y._backward is None and not y.requires_grad

    def test_graph_skipped_without_grad_inputs(self):
        y = T.relu(Tensor(np.ones(3)))
        assert y._backward is None

    def test_conv_gradients(self):
        r = rng()
        assert_gradients_match(
            lambda x, w, b: T.mean(T.conv2d(x, w, b, stride=2, padding=1)),
            [r.standard_normal((2, 3, 6, 6)), r.standard_normal((4, 3, 4, 4)),
             r.standard_normal(4)])

    def test_conv_gradients_unbatched(self):
        r = rng()
        assert_gradients_match(
            lambda x, w, b: T.mean(T.conv2d(x, w, b, stride=1, padding=1)),
            [r.standard_normal((2, 5, 5)), r.standard_normal((3, 2, 3, 3)),
             r.standard_normal(3)])

    def test_group_norm_gradients(self):
        r = rng()
        assert_gradients_match(
            lambda x, g, b: T.mean(T.tanh(T.group_norm(x, 2, g, b))),
            [r.standard_normal((2, 4, 3, 3)), r.standard_normal(4), r.standard_normal(4)])

    def test_linear_gradients(self):
        r = rng()
        assert_gradients_match(
            lambda x, w, b: T.mean(T.selu(T.linear(x, w, b))),
            [r.standard_normal((5, 4)), r.standard_normal((3, 4)), r.standard_normal(3)])

    def test_loss_gradients(self):
        r = rng()
        target = r.standard_normal((3, 4))
        assert_gradients_match(lambda p, t: T.l1_loss(p, t),
                               [r.standard_normal((3, 4)) + 0.3, target])
        assert_gradients_match(lambda p, t: T.l2_loss(p, t),
                               [r.standard_normal((3, 4)), target])

    def test_upsample_gradients_integer_and_fractional(self):
        r = rng()
        assert_gradients_match(lambda x: T.mean(T.upsample_nearest(x, 6, 6)),
                               [r.standard_normal((2, 3, 3))])
        assert_gradients_match(lambda x: T.l2_loss(T.upsample_nearest(x, 5, 7),
                                                   Tensor(np.zeros((2, 5, 7)))),
                               [r.standard_normal((2, 2, 3))])

    def test_adaptive_pool_gradients(self):
        r = rng()
        assert_gradients_match(lambda x: T.mean(T.adaptive_avg_pool2d(x, 2, 3)),
                               [r.standard_normal((2, 5, 7))])

    def test_concat_add_neg_gradients(self):
        r = rng()
        assert_gradients_match(
            lambda a, b: T.mean(T.concat([T.neg(a), T.add(b, b)])),
            [r.standard_normal(4), r.standard_normal(3)])


class TestOptim:
    def test_adam_first_step_magnitude(self):
        p = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
        p.grad = np.array([1.0], dtype=np.float32)
        adam_step([p], AdamState(lr=0.1))
        assert p.data[0] == pytest.approx(-0.1, rel=1e-4)

    def test_adam_minimises_quadratic(self):
        x = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        opt = Adam([x], lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            loss = T.l2_loss(x, Tensor(np.array([0.0], dtype=np.float32)))
            loss.backward()
            opt.step()
        assert abs(x.data[0]) < 1e-2

    def test_adam_missing_grad_is_fault(self):
        p = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
        with pytest.raises(TrainingFault):
            adam_step([p], AdamState(lr=0.1))

    def test_train_control_early_stop_counting(self):
        ctrl = TrainControl(lr=0.1, patience=3)
        sigs = [train_control_step(ctrl, 1.0) for _ in range(4)]
        assert sigs[:3] == [TrainSignal.CONTINUE] * 3
        assert sigs[3] == TrainSignal.STOP

    def test_train_control_decay_schedule(self):
        ctrl = TrainControl(lr=0.1, decay_factor=0.5, decay_every=2, patience=100)
        for loss_value in [4.0, 3.0, 2.0, 1.0]:
            train_control_step(ctrl, loss_value)
        assert ctrl.lr == pytest.approx(0.025)

    def test_train_control_nan_is_fault(self):
        ctrl = TrainControl(lr=0.1)
        assert train_control_step(ctrl, float("nan")) == TrainSignal.FAULT

    def test_train_control_improvement_resets_patience(self):
        ctrl = TrainControl(lr=0.1, patience=2)
        assert ctrl.update(1.0) == TrainSignal.CONTINUE
        assert ctrl.update(1.0) == TrainSignal.CONTINUE  # 1 stale epoch
        assert ctrl.update(0.5) == TrainSignal.CONTINUE  # improves, counter resets
        assert ctrl.update(0.5) == TrainSignal.CONTINUE
        assert ctrl.update(0.5) == TrainSignal.STOP


class TestErrors:
    def test_conv_non_integer_output(self):
        x = Tensor(np.zeros((1, 5, 5), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        with pytest.raises(ConfigurationError):
            T.conv2d(x, w, b, stride=2, padding=0)

    def test_conv_channel_mismatch(self):
        x = Tensor(np.zeros((2, 5, 5), dtype=np.float32))
        w = Tensor(np.zeros((1, 3, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        with pytest.raises(ConfigurationError):
            T.conv2d(x, w, b)

    def test_group_norm_divisibility(self):
        x = Tensor(np.zeros((6, 2, 2), dtype=np.float32))
        with pytest.raises(ConfigurationError):
            T.group_norm(x, 4, Tensor(np.ones(6, dtype=np.float32)),
                         Tensor(np.zeros(6, dtype=np.float32)))

    def test_linear_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            T.linear(Tensor(np.zeros(4)), Tensor(np.zeros((3, 5))), Tensor(np.zeros(3)))

    def test_loss_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            T.l2_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_min_pool_target_too_large(self):
        with pytest.raises(ConfigurationError):
            T.min_pool2d(np.zeros((4, 4), dtype=np.float32), 5, 2)

    def test_unknown_activation_and_loss(self):
        with pytest.raises(ConfigurationError):
            T.activation("gelu", Tensor(np.zeros(1)))
        with pytest.raises(ConfigurationError):
            T.loss("huber", Tensor(np.zeros(1)), Tensor(np.zeros(1)))

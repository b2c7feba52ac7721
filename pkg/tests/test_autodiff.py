"""Unit and property tests for the reverse-mode engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracttransfer import autodiff as ad
from tracttransfer.autodiff import ComputationGraph, Tensor, backward
from tracttransfer.errors import GraphError, ParameterError, ShapeError
from tracttransfer.rng import RngState

from conftest import gradcheck


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.arange(9.0).reshape(3, 3))
        out = ad.matmul(Tensor(np.eye(3)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_checked_2x2(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self, rng64):
        a = Tensor(rng64.uniform(-2, 2, (4, 5)))
        b = Tensor(rng64.uniform(-2, 2, (5, 3)))
        gradcheck(lambda: ad.sum_all(ad.matmul(a, b)), [a, b], rtol=1e-6)


class TestConv2d:
    def test_identity_kernel(self, rng64):
        x = Tensor(rng64.uniform(-1, 1, (1, 6, 6)))
        kernel = Tensor(np.ones((1, 1, 1, 1)))
        out = ad.conv2d(x, kernel, Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_kernel_constant_bias(self, rng64):
        x = Tensor(rng64.uniform(-1, 1, (2, 5, 5)))
        kernel = Tensor(np.zeros((3, 2, 3, 3)))
        out = ad.conv2d(x, kernel, Tensor(np.full(3, 2.5)))
        np.testing.assert_array_equal(out.data, np.full((3, 5, 5), 2.5))

    def test_matches_direct_cross_correlation(self, rng64):
        x = rng64.uniform(-1, 1, (2, 6, 7))
        kernel = rng64.uniform(-1, 1, (3, 2, 3, 3))
        bias = rng64.uniform(-1, 1, 3)
        out = ad.conv2d(Tensor(x), Tensor(kernel), Tensor(bias)).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        expected = np.empty((3, 6, 7))
        for co in range(3):
            for i in range(6):
                for j in range(7):
                    expected[co, i, j] = (
                        kernel[co] * xp[:, i:i + 3, j:j + 3]
                    ).sum() + bias[co]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_gradient_matches_finite_differences(self, rng64):
        x = Tensor(rng64.uniform(-2, 2, (2, 8, 8)))
        kernel = Tensor(rng64.uniform(-1, 1, (3, 2, 3, 3)))
        bias = Tensor(rng64.uniform(-1, 1, 3))
        gradcheck(lambda: ad.sum_all(ad.sigmoid(ad.conv2d(x, kernel, bias))),
                  [x, kernel, bias], rtol=1e-5)

    def test_batched_agrees_with_per_subject(self, rng64):
        x = rng64.uniform(-1, 1, (4, 2, 6, 6))
        kernel = Tensor(rng64.uniform(-1, 1, (3, 2, 3, 3)))
        bias = Tensor(rng64.uniform(-1, 1, 3))
        batched = ad.conv2d(Tensor(x), kernel, bias).data
        for i in range(4):
            single = ad.conv2d(Tensor(x[i]), kernel, bias).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            ad.conv2d(Tensor(np.zeros((2, 4, 4))),
                      Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ParameterError, match="odd"):
            ad.conv2d(Tensor(np.zeros((1, 4, 4))),
                      Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))


class TestSigmoid:
    def test_zero_maps_to_half(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5

    @given(st.floats(min_value=-30, max_value=30))
    def test_symmetry(self, x):
        total = ad.sigmoid(Tensor([x])).data[0] + ad.sigmoid(Tensor([-x])).data[0]
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_extreme_input_stays_finite(self):
        value = ad.sigmoid(Tensor([710.0])).data[0]
        assert 0.0 < value <= 1.0
        value = ad.sigmoid(Tensor([-710.0])).data[0]
        assert np.isfinite(value) and value >= 0.0

    def test_gradient(self, rng64):
        x = Tensor(rng64.uniform(-2, 2, (3, 4)))
        gradcheck(lambda: ad.sum_all(ad.sigmoid(x)), [x], rtol=1e-6)


class TestRelu:
    def test_examples(self):
        np.testing.assert_array_equal(
            ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(
            ad.relu(Tensor([-3.0, -0.5])).data, [0.0, 0.0])

    def test_gradient_mask_away_from_zero(self, rng64):
        values = rng64.uniform(-2, 2, (4, 4))
        values[np.abs(values) < 1e-3] = 0.5  # keep clear of the kink
        x = Tensor(values)
        gradcheck(lambda: ad.sum_all(ad.relu(x)), [x], rtol=1e-6)
        np.testing.assert_array_equal(x.grad, (values > 0).astype(float))


class TestBceLoss:
    def test_perfect_prediction(self):
        y = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        logits = Tensor(np.where(y.data == 1.0, 40.0, -40.0))
        assert ad.bce_loss(logits, y).item() < 1e-6

    def test_uniform_prediction_is_ln2(self):
        loss = ad.bce_loss(Tensor(np.zeros((3, 5))), Tensor(np.ones((3, 5))))
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_matches_direct_summation_oracle(self, rng64):
        z = rng64.uniform(-3, 3, (2, 4))
        y = rng64.integers(0, 2, (2, 4)).astype(float)
        p = 1.0 / (1.0 + np.exp(-z))
        expected = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
        loss = ad.bce_loss(Tensor(z), Tensor(y)).item()
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_mask_restricts_the_mean(self, rng64):
        z = rng64.uniform(-3, 3, (2, 4))
        y = rng64.integers(0, 2, (2, 4)).astype(float)
        mask = np.zeros((2, 4))
        mask[0] = 1.0
        masked = ad.bce_loss(Tensor(z), Tensor(y), Tensor(mask)).item()
        direct = ad.bce_loss(Tensor(z[:1]), Tensor(y[:1])).item()
        assert masked == pytest.approx(direct, abs=1e-12)

    def test_gradient(self, rng64):
        z = Tensor(rng64.uniform(-2, 2, (3, 4)))
        y = Tensor(rng64.integers(0, 2, (3, 4)).astype(float))
        gradcheck(lambda: ad.bce_loss(z, y), [z], rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.bce_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


class TestDropout:
    def test_rate_zero_is_identity(self, rng64):
        x = Tensor(rng64.uniform(-1, 1, (5, 5)))
        for training in (True, False):
            out = ad.dropout(x, 0.0, RngState(1), training)
            np.testing.assert_array_equal(out.data, x.data)

    def test_eval_mode_is_identity(self, rng64):
        x = Tensor(rng64.uniform(-1, 1, (5, 5)))
        out = ad.dropout(x, 0.7, RngState(1), training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_empirical_zero_fraction(self):
        x = Tensor(np.ones(1_000_000))
        out = ad.dropout(x, 0.4, RngState(7), training=True)
        zero_fraction = (out.data == 0.0).mean()
        assert abs(zero_fraction - 0.4) < 0.003
        survivors = out.data[out.data != 0.0]
        np.testing.assert_allclose(survivors, 1.0 / 0.6, atol=1e-12)

    def test_same_rng_state_reproduces_mask(self):
        x = Tensor(np.ones((40, 40)))
        a = ad.dropout(x, 0.4, RngState(3).child("drop"), training=True)
        b = ad.dropout(x, 0.4, RngState(3).child("drop"), training=True)
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_invalid_rate(self, rate):
        with pytest.raises(ParameterError):
            ad.dropout(Tensor(np.ones(3)), rate, RngState(0), training=True)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with ComputationGraph() as graph:
            loss = ad.sum_all(x)
        backward(graph, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares_gives_2x(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        with ComputationGraph() as graph:
            loss = ad.sum_all(ad.mul(x, x))
        backward(graph, loss)
        np.testing.assert_array_equal(x.grad, 2.0 * x.data)

    def test_gradients_accumulate_across_uses(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with ComputationGraph() as graph:
            loss = ad.sum_all(ad.add(x, x))
        backward(graph, loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with ComputationGraph() as graph:
            out = ad.relu(x)
        with pytest.raises(GraphError, match="scalar"):
            backward(graph, out)

    def test_two_passes_are_bit_identical(self, rng64):
        data = rng64.uniform(-1, 1, (3, 3))

        def run():
            x = Tensor(data.copy(), requires_grad=True)
            w = Tensor(np.full((3, 3), 0.5), requires_grad=True)
            with ComputationGraph() as graph:
                out = ad.sigmoid(ad.matmul(w, x))
                loss = ad.bce_loss(out, Tensor(np.zeros((3, 3))))
            backward(graph, loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        loss_a, gx_a, gw_a = run()
        loss_b, gx_b, gw_b = run()
        assert loss_a == loss_b
        np.testing.assert_array_equal(gx_a, gx_b)
        np.testing.assert_array_equal(gw_a, gw_b)


class TestPipelineOps:
    def test_avg_pool_and_upsample_gradients(self, rng64):
        x = Tensor(rng64.uniform(-2, 2, (2, 4, 4)))
        gradcheck(lambda: ad.sum_all(ad.sigmoid(ad.avg_pool2(x))), [x], rtol=1e-6)
        gradcheck(lambda: ad.sum_all(ad.sigmoid(ad.upsample2(x))), [x], rtol=1e-6)

    def test_upsample_values(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        out = ad.upsample2(x).data
        np.testing.assert_array_equal(
            out[0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_avg_pool_values(self):
        x = Tensor(np.arange(16.0).reshape(1, 4, 4))
        out = ad.avg_pool2(x).data
        np.testing.assert_array_equal(out[0], [[2.5, 4.5], [10.5, 12.5]])

    def test_reshape_transpose_gradients(self, rng64):
        x = Tensor(rng64.uniform(-2, 2, (2, 3, 4)))
        gradcheck(lambda: ad.sum_all(
            ad.sigmoid(ad.reshape(ad.transpose(x, (1, 0, 2)), (3, 8)))),
            [x], rtol=1e-6)

    def test_add_row_bias(self, rng64):
        x = Tensor(rng64.uniform(-1, 1, (3, 5)))
        bias = Tensor(np.array([1.0, -1.0, 0.5]))
        out = ad.add_row_bias(x, bias)
        np.testing.assert_allclose(out.data, x.data + bias.data[:, None], atol=0)
        gradcheck(lambda: ad.sum_all(ad.sigmoid(ad.add_row_bias(x, bias))),
                  [x, bias], rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_no_nan_for_bounded_inputs(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1e3, 1e3, (2, 4, 4)), requires_grad=True)
    kernel = Tensor(rng.uniform(-1e3, 1e3, (2, 2, 3, 3)), requires_grad=True)
    bias = Tensor(rng.uniform(-1e3, 1e3, 2), requires_grad=True)
    y = Tensor(rng.integers(0, 2, (2, 4, 4)).astype(float))
    with ComputationGraph() as graph:
        h = ad.relu(ad.conv2d(x, kernel, bias))
        loss = ad.bce_loss(h, y)
    backward(graph, loss)
    assert np.isfinite(loss.data)
    for leaf in (x, kernel, bias):
        assert np.all(np.isfinite(leaf.grad))

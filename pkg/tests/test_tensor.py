import numpy as np
import pytest

from fetalbiometry import tensor as T
from fetalbiometry.tensor import BatchNormState, ShapeError, Tensor


def rand(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(9, dtype=float).reshape(1, 1, 3, 3))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = T.conv2d(x, Tensor(w), Tensor(np.zeros(1)), padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_one_by_one_scale_and_bias(self):
        x = Tensor(np.ones((1, 1, 2, 2)))
        out = T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.ones(1)), padding=0)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data

        pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expect = np.zeros((1, 3, 5, 5))
        for n in range(1):
            for co in range(3):
                for i in range(5):
                    for j in range(5):
                        acc = b[co]
                        for ci in range(2):
                            for ki in range(3):
                                for kj in range(3):
                                    acc += pad[n, ci, i + ki, j + kj] * w[co, ci, ki, kj]
                        expect[n, co, i, j] = acc
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_same_padding_preserves_shape(self):
        for h, w in [(1, 1), (3, 7), (5, 4)]:
            x = rand(1, 1, h, w, seed=h * 10 + w)
            out = T.conv2d(x, rand(2, 1, 3, 3, seed=1), Tensor(np.zeros(2)), padding=1)
            assert out.shape == (1, 2, h, w)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(rand(1, 2, 4, 4), rand(1, 3, 3, 3, seed=1), Tensor(np.zeros(1)))

    def test_nonpositive_stride_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(rand(1, 1, 4, 4), rand(1, 1, 3, 3, seed=1), Tensor(np.zeros(1)),
                     padding=1, stride=0)


class TestMaxPool:
    def test_basic(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.maxpool2x2(x)
        assert out.data.reshape(-1)[0] == 4.0

    def test_constant_input(self):
        out = T.maxpool2x2(Tensor(np.full((1, 2, 4, 4), 7.5)))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 7.5))

    def test_matches_window_scan_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 1, 4, 4))
        out = T.maxpool2x2(Tensor(x)).data
        for i in range(2):
            for j in range(2):
                assert out[0, 0, i, j] == x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()

    def test_odd_size_rejected(self):
        with pytest.raises(ShapeError):
            T.maxpool2x2(rand(1, 1, 3, 4))

    def test_tie_gradient_goes_to_first_cell(self):
        x = Tensor(np.full((1, 1, 2, 2), 1.0), requires_grad=True)
        T.backward(T.tsum(T.maxpool2x2(x)))
        np.testing.assert_array_equal(
            x.grad, np.array([[1.0, 0.0], [0.0, 0.0]]).reshape(1, 1, 2, 2))


class TestUpsample:
    def test_single_cell(self):
        out = T.upsample2x_nearest(Tensor(np.full((1, 1, 1, 1), 5.0)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))

    def test_pool_then_upsample_constant(self):
        c = Tensor(np.full((1, 1, 4, 4), 3.25))
        out = T.upsample2x_nearest(T.maxpool2x2(c))
        np.testing.assert_array_equal(out.data, c.data)

    def test_gradient_counts_replications(self):
        x = Tensor(np.zeros((1, 1, 2, 3)), requires_grad=True)
        T.backward(T.tsum(T.upsample2x_nearest(x)))
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 3), 4.0))


class TestBatchNorm:
    def test_constant_input_maps_near_zero(self):
        x = Tensor(np.full((2, 3, 4, 4), 2.0))
        out = T.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                            BatchNormState(3), "train")
        assert np.abs(out.data).max() <= 1e-2

    def test_zero_gamma_gives_beta(self):
        x = rand(2, 2, 3, 3, seed=9)
        out = T.batchnorm2d(x, Tensor(np.zeros(2)), Tensor(np.array([1.5, -2.0])),
                            BatchNormState(2), "train")
        np.testing.assert_array_equal(out.data[:, 0], np.full((2, 3, 3), 1.5))
        np.testing.assert_array_equal(out.data[:, 1], np.full((2, 3, 3), -2.0))

    def test_train_output_is_normalized(self):
        # large input variance so the epsilon in the denominator is negligible
        x = Tensor(rand(4, 3, 8, 8, seed=11).data * 1000.0)
        out = T.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                            BatchNormState(3), "train").data
        mean = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        assert np.abs(mean).max() <= 1e-9
        assert np.abs(var - 1.0).max() <= 1e-6

    def test_degenerate_batch_rejected(self):
        with pytest.raises(ShapeError):
            T.batchnorm2d(rand(1, 2, 1, 1), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                          BatchNormState(2), "train")

    def test_eval_uses_running_stats(self):
        st = BatchNormState(1)
        st.running_mean[:] = 2.0
        st.running_var[:] = 4.0
        x = Tensor(np.full((1, 1, 2, 2), 4.0))
        out = T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), st, "eval")
        np.testing.assert_allclose(out.data, 1.0, atol=1e-5)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = rand(3, 4, seed=1)
        x.requires_grad = True
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_gradient(self):
        x = rand(3, 4, seed=2)
        x.requires_grad = True
        T.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            T.backward(rand(2, 2, seed=3))

    def test_repeated_backward_accumulates(self):
        x = rand(3, seed=4)
        x.requires_grad = True
        loss = T.tsum(T.mul(x, x))
        T.backward(loss)
        first = x.grad.copy()
        T.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * first, atol=1e-12)

    def test_fanout_accumulates_both_paths(self):
        # y = sum(x*x) + sum(x*c): x feeds two consumers
        c = rand(4, seed=6)

        def f(x):
            return T.tsum(T.mul(x, x)) + T.tsum(T.mul(x, c))

        err = T.grad_check(f, rand(4, seed=7))
        assert err <= 1e-8

    def test_composite_conv_relu_sum(self):
        rng = np.random.default_rng(13)
        w = Tensor(rng.standard_normal((2, 1, 3, 3)))
        b = Tensor(rng.standard_normal(2))

        def f(x):
            return T.tsum(T.relu(T.conv2d(x, w, b, padding=1)))

        err = T.grad_check(f, Tensor(rng.standard_normal((1, 1, 4, 4))))
        assert err <= 1e-6


class TestGradCheck:
    def test_sum_is_exact(self):
        assert T.grad_check(T.tsum, rand(5, seed=8)) <= 1e-10

    def test_dice_of_sigmoid(self):
        from fetalbiometry.training import dice_loss
        rng = np.random.default_rng(21)
        mask = Tensor((rng.random((1, 1, 3, 3)) > 0.5).astype(float))

        def f(x):
            return dice_loss(T.sigmoid(x), mask)

        assert T.grad_check(f, Tensor(rng.standard_normal((1, 1, 3, 3)))) <= 1e-4

    def test_all_primitives_five_seeds(self):
        results = T.run_gradient_suite(seeds=range(5))
        for name, err in results.items():
            assert err <= 1e-4, f"{name} gradient error {err}"

import numpy as np
import numpy.testing as npt
import pytest

from mca import autograd as ag
from mca.autograd import Tensor, ShapeError
from mca.gradcheck import gradcheck


def rand_tensor(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


class TestConv2d:
    def test_all_ones_3x3(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ag.conv2d(x, w, stride=1, pad=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = ag.conv2d(x, Tensor(w), stride=1, pad=0)
        npt.assert_array_equal(out.data, x.data)

    def test_gradcheck_random(self):
        rng = np.random.default_rng(7)
        x = rand_tensor(rng, 2, 3, 8, 8)
        w = rand_tensor(rng, 4, 3, 3, 3)
        err = gradcheck(lambda: ag.conv2d(x, w, stride=1, pad=1).sum(), [x, w])
        assert err <= 1e-5

    def test_stride_two(self):
        rng = np.random.default_rng(1)
        x = rand_tensor(rng, 1, 2, 8, 8)
        w = rand_tensor(rng, 3, 2, 2, 2)
        out = ag.conv2d(x, w, stride=2, pad=0)
        assert out.shape == (1, 3, 4, 4)
        err = gradcheck(lambda: ag.conv2d(x, w, stride=2, pad=0).sum(), [x, w])
        assert err <= 1e-5

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.ones((1, 2, 4, 4)))
        w = Tensor(np.ones((1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="channel mismatch"):
            ag.conv2d(x, w)


class TestConv1dChannel:
    def test_identity(self):
        m = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
        w = Tensor(np.array([[[1.0]]]))
        out = ag.conv1d_channel(m, w)
        npt.assert_array_equal(out.data, m.data)

    def test_hand_convolution(self):
        m = Tensor(np.array([[[1.0, 2.0, 3.0], [10.0, 20.0, 30.0]]]))
        w = Tensor(np.ones((1, 2, 3)))
        out = ag.conv1d_channel(m, w)
        npt.assert_allclose(out.data[0, 0], [33.0, 66.0, 55.0])

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        m = rand_tensor(rng, 2, 3, 9)
        w = rand_tensor(rng, 1, 3, 5)
        err = gradcheck(lambda: ag.conv1d_channel(m, w).sum(), [m, w])
        assert err <= 1e-5

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ag.conv1d_channel(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 1, 2))))

    def test_row_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="moment-row"):
            ag.conv1d_channel(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 3, 3))))


class TestReduceSpatial:
    def test_mean(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert ag.reduce_spatial(x).data[0, 0] == 2.5

    def test_constant(self):
        x = Tensor(np.full((2, 3, 4, 4), 0.37))
        npt.assert_array_equal(ag.reduce_spatial(x).data, np.full((2, 3), 0.37))

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        x = rand_tensor(rng, 2, 3, 4, 4)
        err = gradcheck(lambda: ag.reduce_spatial(x).sum(), [x])
        assert err <= 1e-6

    def test_empty_spatial_rejected(self):
        with pytest.raises(ShapeError):
            ag.reduce_spatial(Tensor(np.ones((1, 1, 0, 3))))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ag.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_sigmoid_saturation_no_overflow(self):
        out = ag.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        assert out[0] == 0.0 and out[1] == 1.0

    def test_broadcast_mul_identity_gate(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        gate = Tensor(np.ones((2, 3)))
        npt.assert_array_equal(ag.broadcast_mul(x, gate).data, x.data)

    def test_broadcast_mul_bad_gate_rejected(self):
        x = Tensor(np.ones((2, 3, 4, 4)))
        with pytest.raises(ShapeError):
            ag.broadcast_mul(x, Tensor(np.ones((2, 4))))

    def test_uniform_logits_cross_entropy(self):
        logits = Tensor(np.zeros((4, 10)))
        loss = ag.softmax_cross_entropy(logits, np.array([0, 3, 5, 9]))
        npt.assert_allclose(loss.item(), np.log(10.0), rtol=1e-12)

    def test_relu(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]))
        npt.assert_array_equal(ag.relu(x).data, [0.0, 0.0, 2.0])


class TestFusedNorm:
    def test_scale_shift_values(self):
        x = Tensor(np.ones((1, 2, 2, 2)))
        out = ag.channel_scale_shift(x, Tensor(np.array([2.0, 3.0])),
                                     Tensor(np.array([0.5, -0.5])))
        npt.assert_array_equal(out.data[0, 0], np.full((2, 2), 2.5))
        npt.assert_array_equal(out.data[0, 1], np.full((2, 2), 2.5))

    def test_scale_shift_gradcheck(self):
        rng = np.random.default_rng(20)
        x = rand_tensor(rng, 2, 3, 4, 4)
        g = rand_tensor(rng, 3)
        b = rand_tensor(rng, 3)
        err = gradcheck(lambda: ag.channel_scale_shift(x, g, b).sum(), [x, g, b])
        assert err <= 1e-6

    def test_scale_shift_bad_shape_rejected(self):
        with pytest.raises(ShapeError):
            ag.channel_scale_shift(Tensor(np.ones((1, 3, 2, 2))),
                                   Tensor(np.ones(2)), Tensor(np.ones(2)))

    def test_batch_norm_output_standardized(self):
        rng = np.random.default_rng(21)
        x = Tensor(rng.standard_normal((8, 4, 5, 5)) * 3.0 + 2.0)
        out, mu, var = ag.batch_norm_train(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        npt.assert_allclose(out.data.mean(axis=(0, 2, 3)), np.zeros(4), atol=1e-12)
        npt.assert_allclose(out.data.var(axis=(0, 2, 3)), np.ones(4), rtol=1e-4)
        npt.assert_allclose(mu, x.data.mean(axis=(0, 2, 3)), rtol=1e-12)
        npt.assert_allclose(var, x.data.var(axis=(0, 2, 3)), rtol=1e-12)

    def test_batch_norm_gradcheck(self):
        rng = np.random.default_rng(22)
        x = rand_tensor(rng, 3, 2, 4, 4)
        g = rand_tensor(rng, 2)
        b = rand_tensor(rng, 2)
        w = Tensor(rng.uniform(-1, 1, (3, 2, 4, 4)))

        def f():
            out, _, _ = ag.batch_norm_train(x, g, b)
            return ag.mul(out, w).sum()

        assert gradcheck(f, [x, g, b]) <= 1e-5


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        x.sum().backward()
        npt.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic(self):
        x = Tensor(np.random.default_rng(1).standard_normal(5), requires_grad=True)
        ag.mul(x, x).sum().backward()
        npt.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            x.backward()

    def test_accumulation_without_reset(self):
        x = Tensor(np.ones(3), requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        npt.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_deterministic_after_zero_grad(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)

        def run():
            x.zero_grad()
            w.zero_grad()
            ag.sigmoid(ag.conv2d(x, w, pad=1)).sum().backward()
            return x.grad.copy(), w.grad.copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        npt.assert_array_equal(gx1, gx2)
        npt.assert_array_equal(gw1, gw2)

    def test_shared_subexpression_single_accumulation(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = ag.mul(x, x)          # used twice below
        ag.add(y, y).sum().backward()
        npt.assert_allclose(x.grad, [12.0])

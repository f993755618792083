import numpy as np
import pytest

from app import tensor as T
from app.tensor import Tensor
from app.util import ConfigError, DimensionError, NumericError, UsageError
from tests.conftest import assert_gradients_match


def param(array):
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)

    def test_hand_countable(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert out.data.tolist() == [[17.0], [39.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as e:
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert "(2, 3)" in str(e.value)

    def test_gradient(self, rng):
        a = param(rng.normal(size=(4, 3)))
        b = param(rng.normal(size=(3, 5)))
        assert_gradients_match(lambda: T.sum_(T.matmul(a, b)), [a, b], rtol=1e-6)


class TestConv2d:
    def test_all_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), padding=1)
        assert out.data[0, 1, 1, 0] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0
        assert out.data[0, 2, 2, 0] == 4.0
        assert out.data[0, 0, 1, 0] == 6.0

    def test_identity_kernel_is_exact(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 4, 3)))
        out = T.conv2d(x, Tensor(np.eye(3)[None, None]))
        assert np.array_equal(out.data, x.data)

    def test_output_extent(self):
        out = T.conv2d(Tensor(np.ones((1, 7, 7, 1))), Tensor(np.ones((3, 3, 1, 2))), padding=1, stride=2)
        assert out.shape == (1, 4, 4, 2)

    def test_rejects_even_kernel(self):
        with pytest.raises(ConfigError):
            T.conv2d(Tensor(np.ones((1, 4, 4, 1))), Tensor(np.ones((2, 2, 1, 1))))

    def test_rejects_bad_stride(self):
        with pytest.raises(ConfigError):
            T.conv2d(Tensor(np.ones((1, 4, 4, 1))), Tensor(np.ones((3, 3, 1, 1))), stride=0)

    def test_gradient(self, rng):
        x = param(rng.normal(size=(1, 5, 5, 2)))
        w = param(rng.normal(size=(3, 3, 2, 3)))
        b = param(rng.normal(size=3))
        weights = rng.normal(size=(1, 5, 5, 3))
        assert_gradients_match(
            lambda: T.sum_(T.mul(T.conv2d(x, w, b), weights)), [x, w, b], rtol=1e-6
        )


class TestSoftmax:
    def test_symmetric(self):
        assert T.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]

    def test_large_logits_do_not_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] < 1e-300 or out[1] == 0.0

    def test_sums_to_one_and_gradient(self, rng):
        x = param(rng.normal(size=7))
        assert abs(T.softmax(x).data.sum() - 1.0) < 1e-12
        weights = rng.normal(size=7)
        assert_gradients_match(lambda: T.sum_(T.mul(T.softmax(x), weights)), [x], rtol=1e-6)

    def test_rows_sum_to_one_for_wide_inputs(self, rng):
        x = Tensor(rng.uniform(-1e6, 1e6, size=(20, 9)))
        np.testing.assert_allclose(T.softmax(x, axis=-1).data.sum(axis=-1), 1.0, atol=1e-12)

    def test_masked_entries_are_exact_zeros(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        mask = np.array([[True, False, True, True], [False] * 4, [True, True, True, False]])
        out = T.masked_softmax(x, mask).data
        assert np.all(out[~mask] == 0.0)
        assert np.all(out[1] == 0.0)
        np.testing.assert_allclose(out[[0, 2]].sum(axis=-1), 1.0, atol=1e-12)


class TestLayerOps:
    def test_relu(self):
        assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_concat_rows(self):
        a, b = Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3)))
        out = T.concat([a, b], axis=0)
        assert out.shape == (4, 3)
        assert out.data[2:].tolist() == [[1.0] * 3] * 2

    def test_concat_off_axis_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)

    def test_batchnorm_eval_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 3, 4)))
        out = T.batchnorm2d(
            x, Tensor(np.ones(4)), Tensor(np.zeros(4)), np.zeros(4), np.ones(4), training=False, eps=0.0
        )
        assert np.array_equal(out.data, x.data)

    def test_batchnorm_running_statistics(self, rng):
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 5, 5, 2)))
        running_mean, running_var = np.zeros(2), np.ones(2)
        T.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), running_mean, running_var, training=True)
        flat = x.data.reshape(-1, 2)
        np.testing.assert_allclose(running_mean, 0.1 * flat.mean(axis=0))
        np.testing.assert_allclose(running_var, 0.9 + 0.1 * flat.var(axis=0, ddof=1))

    def test_batchnorm_gradient(self, rng):
        x = param(rng.normal(size=(2, 3, 3, 2)))
        gamma = param(rng.uniform(0.5, 1.5, size=2))
        beta = param(rng.normal(size=2))
        weights = rng.normal(size=(2, 3, 3, 2))

        def loss():
            out = T.batchnorm2d(x, gamma, beta, np.zeros(2), np.ones(2), training=True)
            return T.sum_(T.mul(out, weights))

        assert_gradients_match(loss, [x, gamma, beta], rtol=1e-4, atol=1e-7)

    def test_mean_and_add_broadcast_gradient(self, rng):
        x = param(rng.normal(size=(3, 4)))
        b = param(rng.normal(size=4))
        assert_gradients_match(lambda: T.mean(T.mul(T.add(x, b), T.add(x, b))), [x, b], rtol=1e-6)

    def test_bilinear_sample_identity_and_outside(self, rng):
        x = Tensor(rng.normal(size=(4, 5, 2)))
        rows, cols = np.meshgrid(np.arange(4.0), np.arange(5.0), indexing="ij")
        out, mask = T.bilinear_sample(x, rows, cols)
        assert np.array_equal(out.data, x.data)
        assert np.all(mask == 1.0)
        out, mask = T.bilinear_sample(x, rows + 10.0, cols)
        assert np.all(out.data == 0.0)
        assert np.all(mask == 0.0)

    def test_bilinear_sample_gradient(self, rng):
        x = param(rng.normal(size=(4, 5, 2)))
        rows = rng.uniform(-0.5, 3.5, size=(3, 3))
        cols = rng.uniform(-0.5, 4.5, size=(3, 3))
        weights = rng.normal(size=(3, 3, 2))
        assert_gradients_match(
            lambda: T.sum_(T.mul(T.bilinear_sample(x, rows, cols)[0], weights)), [x], rtol=1e-6
        )

    def test_einsum_gradient(self, rng):
        a = param(rng.normal(size=(2, 3, 4)))
        b = param(rng.normal(size=(2, 4, 5)))
        assert_gradients_match(lambda: T.sum_(T.einsum("bij,bjk->bik", a, b)), [a, b], rtol=1e-6)

    def test_einsum_rejects_dropped_index(self):
        with pytest.raises(UsageError):
            T.einsum("ij,jk->i", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))

    def test_fancy_getitem_scatters_gradient(self):
        x = param([1.0, 2.0, 3.0])
        with T.Tape() as tape:
            loss = T.sum_(T.getitem(x, np.array([0, 0, 2])))
        T.backward(loss, [x], tape)
        assert x.grad.tolist() == [2.0, 0.0, 1.0]


class TestBackward:
    def test_sum_gives_ones(self):
        p = param([1.0, -2.0, 3.0])
        with T.Tape() as tape:
            loss = T.sum_(p)
        T.backward(loss, [p], tape)
        assert p.grad.tolist() == [1.0, 1.0, 1.0]

    def test_square(self):
        p = param([1.0, 2.0])
        with T.Tape() as tape:
            loss = T.sum_(T.mul(p, p))
        T.backward(loss, [p], tape)
        assert p.grad.tolist() == [2.0, 4.0]

    def test_unreached_parameter_gets_zero(self):
        p, q = param([1.0]), param([5.0, 6.0])
        with T.Tape() as tape:
            loss = T.sum_(p)
        T.backward(loss, [p, q], tape)
        assert q.grad.tolist() == [0.0, 0.0]

    def test_non_scalar_loss(self):
        p = param([1.0, 2.0])
        with T.Tape() as tape:
            out = T.mul(p, 2.0)
        with pytest.raises(UsageError):
            T.backward(out, [p], tape)

    def test_no_tape_records_nothing(self):
        p = param([1.0, 2.0])
        out = T.mul(p, 2.0)
        assert not out.requires_grad
        with T.Tape() as tape:
            T.mul(Tensor([1.0]), 2.0)
        assert len(tape) == 0

    def test_non_finite_gradient(self):
        p = param([1e-200])
        with T.Tape() as tape:
            loss = T.sum_(T.mul(T.mul(p, 1e200), 1e200))
        with pytest.raises(NumericError, match="mul"):
            T.backward(loss, [p], tape)

    def test_fractional_power_at_zero(self):
        p = param([0.0, 4.0])
        with T.Tape() as tape:
            loss = T.sum_(T.pow_(p, 0.5))
        T.backward(loss, [p], tape)
        assert p.grad.tolist() == [0.0, 0.25]

    def test_non_finite_result(self):
        with pytest.raises(NumericError):
            T.log(Tensor([0.0, 1.0]))


def test_determinism():
    seed_a, seed_b = np.random.default_rng(5), np.random.default_rng(5)
    outs = []
    for generator in (seed_a, seed_b):
        x = Tensor(generator.normal(size=(1, 6, 6, 3)))
        w = Tensor(generator.normal(size=(3, 3, 3, 4)))
        outs.append(T.softmax(T.conv2d(x, w), axis=-1).data)
    assert np.array_equal(outs[0], outs[1])

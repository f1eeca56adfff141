import numpy as np
import pytest

from voxcam.nn import layers as L

from gradcheck import max_rel_error, numeric_grad

TOL = 1e-4
SEEDS = range(5)


def away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


class TestConv3d:
    def test_pointwise_kernel(self):
        out, _ = L.conv3d(np.ones((1, 1, 3, 3, 3)), np.full((1, 1, 1, 1, 1), 2.0), np.zeros(1))
        np.testing.assert_array_equal(out, 2.0)

    def test_zero_kernel_gives_bias(self):
        out, _ = L.conv3d(np.random.default_rng(0).random((2, 3, 4, 4, 4)),
                          np.zeros((5, 3, 3, 3, 3)), np.full(5, 0.25))
        np.testing.assert_array_equal(out, 0.25)

    def test_same_padding_keeps_dims(self):
        out, _ = L.conv3d(np.zeros((2, 1, 5, 6, 7)), np.zeros((4, 1, 3, 3, 3)), np.zeros(4))
        assert out.shape == (2, 4, 5, 6, 7)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 4, 3, 5))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        out, _ = L.conv3d(x, w, b)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        for f, i, j, k in [(0, 0, 0, 0), (2, 3, 2, 4), (1, 1, 1, 2)]:
            expected = b[f] + np.sum(w[f] * xp[0, :, i:i + 3, j:j + 3, k:k + 3])
            assert out[0, f, i, j, k] == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            L.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((3, 1, 3, 3, 3)), np.zeros(3))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 1, 4, 4, 4))
        w = rng.standard_normal((2, 1, 3, 3, 3))
        b = rng.standard_normal(2)
        r = rng.standard_normal((1, 2, 4, 4, 4))

        def loss():
            return float(np.sum(L.conv3d(x, w, b)[0] * r))

        _, cache = L.conv3d(x, w, b)
        dx, dw, db = L.conv3d_backward(r, cache)
        assert max_rel_error(dx, numeric_grad(loss, x)) < TOL
        assert max_rel_error(dw, numeric_grad(loss, w)) < TOL
        assert max_rel_error(db, numeric_grad(loss, b)) < TOL

    def test_gradients_multichannel(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 3, 3, 4, 2))
        w = rng.standard_normal((2, 3, 3, 3, 3))
        b = rng.standard_normal(2)
        r = rng.standard_normal((2, 2, 3, 4, 2))

        def loss():
            return float(np.sum(L.conv3d(x, w, b)[0] * r))

        dx, dw, db = L.conv3d_backward(r, L.conv3d(x, w, b)[1])
        assert max_rel_error(dx, numeric_grad(loss, x)) < TOL
        assert max_rel_error(dw, numeric_grad(loss, w)) < TOL


class TestLeakyRelu:
    def test_values(self):
        out, _ = L.leaky_relu(np.array([-1.0, 3.0, 0.0]), 0.1)
        np.testing.assert_allclose(out, [-0.1, 3.0, 0.0])

    def test_subgradient_at_zero(self):
        _, cache = L.leaky_relu(np.array([0.0]), 0.1)
        assert L.leaky_relu_backward(np.array([1.0]), cache)[0] == 1.0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = away_from_zero(rng, (2, 3, 4))
        r = rng.standard_normal(x.shape)

        def loss():
            return float(np.sum(L.leaky_relu(x, 0.1)[0] * r))

        dx = L.leaky_relu_backward(r, L.leaky_relu(x, 0.1)[1])
        assert max_rel_error(dx, numeric_grad(loss, x)) < TOL


class TestMaxPool:
    def test_block_max(self):
        x = np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2)
        out, _ = L.maxpool3d(x)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.item() == 8.0

    def test_constant(self):
        out, _ = L.maxpool3d(np.full((1, 2, 4, 4, 2), 3.0))
        np.testing.assert_array_equal(out, 3.0)

    def test_odd_dims_drop_trailing(self):
        out, _ = L.maxpool3d(np.ones((1, 1, 5, 4, 3)))
        assert out.shape == (1, 1, 2, 2, 1)

    def test_tie_routes_to_first(self):
        x = np.ones((1, 1, 2, 2, 2))
        _, cache = L.maxpool3d(x)
        dx = L.maxpool3d_backward(np.ones((1, 1, 1, 1, 1)), cache)
        assert dx[0, 0, 0, 0, 0] == 1.0
        assert dx.sum() == 1.0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        # distinct values spaced well beyond the finite-difference step
        x = rng.permutation(np.arange(2 * 4 * 4 * 2, dtype=np.float64) * 0.01).reshape(1, 2, 4, 4, 2)
        r = rng.standard_normal((1, 2, 2, 2, 1))

        def loss():
            return float(np.sum(L.maxpool3d(x)[0] * r))

        dx = L.maxpool3d_backward(r, L.maxpool3d(x)[1])
        assert max_rel_error(dx, numeric_grad(loss, x)) < TOL
        # all upstream gradient lands on the window maxima
        assert np.count_nonzero(dx) == r.size


class TestBatchNorm:
    def _params(self, c):
        return np.ones(c), np.zeros(c), np.zeros(c), np.ones(c)

    def test_train_standardizes(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 3, 5, 5, 2)) * 3 + 2
        out, _, _ = L.batchnorm(x, *self._params(3), train=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3, 4)), 0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3, 4)), 1, atol=1e-4)

    def test_eval_identity(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 2, 2, 2))
        out, _, _ = L.batchnorm(x, *self._params(3), train=False)
        np.testing.assert_allclose(out, x, rtol=1e-5)

    def test_running_stats_momentum(self):
        x = np.random.default_rng(2).standard_normal((8, 2)) + 5
        _, _, (m, v) = L.batchnorm(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), train=True)
        np.testing.assert_allclose(m, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(v, 0.9 + 0.1 * x.var(axis=0))

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("train", [True, False])
    def test_gradients(self, seed, train):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 2, 2, 3, 2))
        gamma = rng.uniform(0.5, 1.5, 2)
        beta = rng.standard_normal(2)
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
        r = rng.standard_normal(x.shape)

        def loss():
            return float(np.sum(L.batchnorm(x, gamma, beta, rm, rv, train)[0] * r))

        dx, dg, db = L.batchnorm_backward(r, L.batchnorm(x, gamma, beta, rm, rv, train)[1])
        assert max_rel_error(dx, numeric_grad(loss, x)) < TOL
        assert max_rel_error(dg, numeric_grad(loss, gamma)) < TOL
        assert max_rel_error(db, numeric_grad(loss, beta)) < TOL

    def test_dense_layout_gradient(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 4))
        gamma, beta = rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)
        r = rng.standard_normal(x.shape)

        def loss():
            return float(np.sum(L.batchnorm(x, gamma, beta, np.zeros(4), np.ones(4), True)[0] * r))

        dx, _, _ = L.batchnorm_backward(r, L.batchnorm(x, gamma, beta, np.zeros(4), np.ones(4), True)[1])
        assert max_rel_error(dx, numeric_grad(loss, x)) < TOL


class TestDropout:
    def test_rate_zero_identity(self):
        x = np.random.default_rng(0).random((3, 4))
        out, _ = L.dropout(x, 0.0, True, np.random.default_rng(1))
        np.testing.assert_array_equal(out, x)

    def test_eval_identity(self):
        x = np.random.default_rng(0).random((3, 4))
        out, _ = L.dropout(x, 0.3, False, None)
        np.testing.assert_array_equal(out, x)

    def test_kept_fraction(self):
        x = np.ones(100_000)
        out, _ = L.dropout(x, 0.3, True, np.random.default_rng(2))
        assert abs(np.mean(out > 0) - 0.7) < 0.01
        np.testing.assert_allclose(out[out > 0], 1 / 0.7)

    def test_deterministic_per_seed(self):
        x = np.ones((10, 10))
        a, _ = L.dropout(x, 0.3, True, np.random.default_rng(5))
        b, _ = L.dropout(x, 0.3, True, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_backward_uses_same_mask(self):
        x = np.ones(50)
        out, cache = L.dropout(x, 0.5, True, np.random.default_rng(3))
        np.testing.assert_array_equal(L.dropout_backward(np.ones(50), cache), out)


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(0).random((2, 3))
        out, _ = L.dense(x, np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(out, x)

    def test_zero_input(self):
        out, _ = L.dense(np.zeros((2, 3)), np.ones((3, 2)), np.array([1.0, -2.0]))
        np.testing.assert_array_equal(out, [[1.0, -2.0], [1.0, -2.0]])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
        r = rng.standard_normal((3, 2))

        def loss():
            return float(np.sum(L.dense(x, w, b)[0] * r))

        dx, dw, db = L.dense_backward(r, L.dense(x, w, b)[1])
        assert max_rel_error(dx, numeric_grad(loss, x)) < TOL
        assert max_rel_error(dw, numeric_grad(loss, w)) < TOL
        assert max_rel_error(db, numeric_grad(loss, b)) < TOL


class TestGlobalAvgPool:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 2, 3, 2))
        r = rng.standard_normal((2, 3))

        def loss():
            return float(np.sum(L.global_avg_pool(x)[0] * r))

        dx = L.global_avg_pool_backward(r, L.global_avg_pool(x)[1])
        assert max_rel_error(dx, numeric_grad(loss, x)) < TOL


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        probs, loss, _ = L.softmax_cross_entropy(np.array([[0.0, 0.0]]), [0])
        np.testing.assert_allclose(probs, [[0.5, 0.5]])
        assert loss == pytest.approx(np.log(2), abs=1e-12)

    def test_confident_correct(self):
        probs, loss, _ = L.softmax_cross_entropy(np.array([[100.0, 0.0]]), [0])
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(probs).all()

    def test_large_logits_stable(self):
        probs, loss, _ = L.softmax_cross_entropy(np.array([[1000.0, -1000.0]]), [1])
        assert np.isfinite(loss) and loss == pytest.approx(2000.0)
        assert probs.sum() == pytest.approx(1.0)

    def test_single_sample_dlogits(self):
        _, _, d = L.softmax_cross_entropy(np.array([[0.3, -0.2]]), [1])
        p = L.softmax(np.array([0.3, -0.2]))
        np.testing.assert_allclose(d[0], p - [0, 1])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((4, 2)) * 2
        labels = rng.integers(0, 2, 4)

        def loss():
            return L.softmax_cross_entropy(logits, labels)[1]

        _, _, d = L.softmax_cross_entropy(logits, labels)
        assert max_rel_error(d, numeric_grad(loss, logits)) < TOL

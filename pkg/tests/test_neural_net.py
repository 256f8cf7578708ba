"""
神经网络模块测试：层、反向传播、AdaMax、损失函数、权重文件
"""

import numpy as np
import pytest

from modules.errors import NetworkStateError, NonFiniteError, RayIPDGError, exit_code_for
from modules.neural_net import (AdaMax, BatchNorm, Conv, Dense, MaxPool, Network, backward, load_weights, loss_mse,
                                loss_mse_grad, loss_mse_norm1, loss_mse_norm1_grad, loss_value, save_weights)


def small_network(seed=3):
    return Network.build(dim=2, n_fine=4, n_directions=1, channels=(2, 3), hidden=5, seed=seed)


def scalar_output(net, x, upstream):
    return float(np.sum(net.forward(x, training=True) * upstream))


class TestBackpropagation:
    def test_parameter_gradients_match_finite_differences(self, rng):
        net = small_network()
        x = rng.normal(size=(3,) + net.input_shape)
        upstream = rng.normal(size=(3, net.output_size))
        analytic = np.concatenate([g.ravel() for g in backward(net, x, upstream)])
        step = 1e-6
        numeric = []
        for p in net.parameters():
            for i in range(p.size):
                old = p.flat[i]
                p.flat[i] = old + step
                plus = scalar_output(net, x, upstream)
                p.flat[i] = old - step
                minus = scalar_output(net, x, upstream)
                p.flat[i] = old
                numeric.append((plus - minus) / (2 * step))
        numeric = np.array(numeric)
        assert np.linalg.norm(analytic - numeric) <= 1e-4 * np.linalg.norm(numeric) + 1e-8

    def test_input_gradient_matches_finite_differences(self, rng):
        net = small_network()
        x = rng.normal(size=(2,) + net.input_shape)
        upstream = rng.normal(size=(2, net.output_size))
        net.forward(x, training=True)
        analytic = net.backward(upstream)
        step = 1e-6
        indices = rng.choice(x.size, size=12, replace=False)
        numeric = []
        for i in indices:
            shifted = x.copy()
            shifted.flat[i] += step
            plus = scalar_output(net, shifted, upstream)
            shifted.flat[i] -= 2 * step
            minus = scalar_output(net, shifted, upstream)
            numeric.append((plus - minus) / (2 * step))
        numeric = np.array(numeric)
        picked = analytic.ravel()[indices]
        assert np.linalg.norm(picked - numeric) <= 1e-4 * np.linalg.norm(numeric) + 1e-8

    def test_backward_before_forward(self):
        with pytest.raises(NetworkStateError):
            Dense(3, 2).backward(np.ones((1, 2)))
        with pytest.raises(NetworkStateError):
            small_network().backward(np.ones((1, 2)))


class TestLayers:
    def test_conv_identity_kernel(self, rng):
        conv = Conv(1, 1, dim=2)
        conv.params['W'][:] = 0.0
        conv.params['W'][0, 0, 1, 1] = 1.0
        x = rng.normal(size=(2, 1, 5, 5))
        np.testing.assert_allclose(conv.forward(x), x)

    def test_conv_zero_padding(self):
        conv = Conv(1, 1, dim=2)
        conv.params['W'][:] = 1.0
        out = conv.forward(np.ones((1, 1, 3, 3)))
        assert out[0, 0, 1, 1] == pytest.approx(9.0)
        assert out[0, 0, 0, 0] == pytest.approx(4.0)

    def test_max_pool(self):
        pool = MaxPool(dim=2)
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = pool.forward(x)
        np.testing.assert_allclose(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])
        routed = pool.backward(np.ones((1, 1, 2, 2)))
        assert set(np.flatnonzero(routed)) == {5, 7, 13, 15}

    def test_max_pool_identity_for_single_sample(self):
        pool = MaxPool(dim=2)
        x = np.ones((1, 3, 1, 1))
        assert pool.forward(x) is x

    def test_batch_norm_training_statistics(self, rng):
        bn = BatchNorm(2, dim=2)
        x = rng.normal(loc=3.0, scale=2.0, size=(4, 2, 3, 3))
        out = bn.forward(x, training=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)
        np.testing.assert_allclose(bn.buffers['running_mean'], 0.1 * x.mean(axis=(0, 2, 3)))

    def test_batch_norm_inference_uses_running_statistics(self, rng):
        bn = BatchNorm(2, dim=2)
        x = rng.normal(size=(1, 2, 2, 2))
        np.testing.assert_allclose(bn.forward(x), x / np.sqrt(1.0 + 1e-5))


class TestNetwork:
    def test_shapes_2d(self, rng):
        net = small_network()
        assert net.input_shape == (2, 4, 4)
        assert net.predict(rng.normal(size=(5, 2, 4, 4))).shape == (5, 2)

    def test_shapes_3d(self, rng):
        net = Network.build(dim=3, n_fine=4, n_directions=2, channels=(2,), hidden=4)
        assert net.predict(rng.normal(size=(1, 2, 4, 4, 4))).shape == (1, 6)

    def test_rejects_wrong_input_shape(self, rng):
        with pytest.raises(RayIPDGError):
            small_network().predict(rng.normal(size=(1, 2, 8, 8)))

    def test_predict_matches_inference_forward(self, rng):
        net = small_network()
        x = rng.normal(size=(3, 2, 4, 4))
        np.testing.assert_allclose(net.predict(x), net.forward(x, training=False))

    def test_snapshot_restore(self, rng):
        net = small_network()
        x = rng.normal(size=(2, 2, 4, 4))
        before = net.predict(x)
        state = net.snapshot()
        net.forward(x, training=True)
        for p in net.parameters():
            p += 0.1
        assert not np.allclose(net.predict(x), before)
        net.restore(state)
        np.testing.assert_allclose(net.predict(x), before)

    def test_seed_is_deterministic(self):
        a = small_network(seed=7).parameters()
        b = small_network(seed=7).parameters()
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa, pb)

    def test_nan_input_is_trapped(self, rng):
        x = rng.normal(size=(2, 2, 4, 4))
        x[1, 0, 2, 3] = np.nan
        net = small_network()
        with pytest.raises(NonFiniteError) as info:
            net.predict(x)
        assert exit_code_for(info.value) == 2
        with pytest.raises(NonFiniteError):
            net.forward(x, training=True)

    def test_overflowing_layer_is_trapped(self, rng):
        net = small_network()
        dense = [layer for layer in net.layers if isinstance(layer, Dense)][-1]
        dense.params['W'][0, 0] = np.inf
        with pytest.raises(NonFiniteError, match='Dense'):
            net.predict(rng.normal(size=(1, 2, 4, 4)))


class TestAdaMax:
    def test_first_step_is_sign_step(self):
        params = [np.zeros(2)]
        AdaMax(lr=0.002).step(params, [np.array([0.5, -2.0])])
        np.testing.assert_allclose(params[0], [-0.002, 0.002])

    def test_descends_quadratic(self):
        params = [np.array([1.0, -3.0])]
        opt = AdaMax(lr=0.05)
        for _ in range(400):
            opt.step(params, [2.0 * params[0]])
        assert np.linalg.norm(params[0]) < 0.1

    def test_shape_mismatch(self):
        with pytest.raises(RayIPDGError):
            AdaMax().step([np.zeros(2)], [np.zeros(3)])


class TestLosses:
    def test_mse_value(self):
        assert loss_mse(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == pytest.approx(25.0)

    def test_norm1_penalizes_length(self):
        y = np.array([[1.0, 0.0]])
        y_hat = np.array([[0.0, 2.0]])
        assert loss_mse_norm1(y, y_hat, dim=2) == pytest.approx(5.0 + 3.0)

    @pytest.mark.parametrize("kind", ["mse", "mse_norm1"])
    def test_gradients_match_finite_differences(self, kind, rng):
        y = rng.normal(size=(3, 4))
        y_hat = rng.normal(size=(3, 4))
        grad = loss_mse_grad(y, y_hat) if kind == 'mse' else loss_mse_norm1_grad(y, y_hat, 2)
        step = 1e-6
        numeric = np.zeros_like(y_hat)
        for i in range(y_hat.size):
            shifted = y_hat.copy()
            shifted.flat[i] += step
            plus = loss_value(kind, y, shifted, 2)
            shifted.flat[i] -= 2 * step
            minus = loss_value(kind, y, shifted, 2)
            numeric.flat[i] = (plus - minus) / (2 * step)
        np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-7)

    def test_unknown_loss(self):
        with pytest.raises(RayIPDGError):
            loss_value('huber', np.zeros((1, 2)), np.zeros((1, 2)), 2)


class TestWeightsFile:
    def test_round_trip(self, tmp_path, rng):
        net = small_network()
        x = rng.normal(size=(3, 2, 4, 4))
        net.forward(x, training=True)
        path = str(tmp_path / 'weights' / 'net.bin')
        save_weights(path, net)
        loaded = load_weights(path)
        assert (loaded.dim, loaded.n_fine, loaded.n_directions) == (2, 4, 1)
        np.testing.assert_array_equal(loaded.predict(x), net.predict(x))

    def test_truncated(self, tmp_path):
        path = tmp_path / 'net.bin'
        save_weights(str(path), small_network())
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 10])
        with pytest.raises(RayIPDGError):
            load_weights(str(path))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'net.bin'
        path.write_bytes(b'NOTNET' + bytes(32))
        with pytest.raises(RayIPDGError):
            load_weights(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(RayIPDGError):
            load_weights(str(tmp_path / 'none.bin'))

import numpy as np
import pytest

from spotkit import convnet, synth, training
from spotkit.autodiff import Tape, gradient_check
from spotkit.errors import InvalidArgumentError
from spotkit.models import init_convnet_from_data, model_for_gradcheck


def forward_direct(weights, biases, d):
    """Straight-line re-evaluation with explicit loops over every index."""
    h = [np.asarray(d, dtype=float)]
    H, W = d.shape
    for w, b in zip(weights, biases):
        c_out, c_in, kh, kw = w.shape
        out = []
        for o in range(c_out):
            acc = np.full((H, W), b[o])
            for i in range(c_in):
                for y in range(H):
                    for x in range(W):
                        s = 0.0
                        for u in range(kh):
                            for v in range(kw):
                                r, c = y - (u - kh // 2), x - (v - kw // 2)
                                if 0 <= r < H and 0 <= c < W:
                                    s += w[o, i, u, v] * h[i][r, c]
                        acc[y, x] += s
            out.append(np.maximum(acc, 0.0))
        h = out
    return h[0]


def small_dataset(count=12, seed=3):
    spec = synth.SceneSpec(height=16, width=16, n_min=1, n_max=2, sigma_min=1.0,
                           sigma_max=1.3, min_separation=4.0, seed=seed)
    return synth.make_dataset(spec, count)


class TestModel:
    def test_init_shapes_and_bounds(self):
        m = convnet.init_convnet(3, 8, 7, seed=0)
        assert [w.shape for w in m.weights] == [(8, 1, 7, 7), (8, 8, 7, 7), (1, 8, 7, 7)]
        assert m.param_count() == 8 * 49 + 8 + 8 * 8 * 49 + 8 + 8 * 49 + 1
        for w, fan_in in zip(m.weights, (49, 8 * 49, 8 * 49)):
            assert np.abs(w).max() <= 1 / np.sqrt(fan_in)
        assert all(not b.any() for b in m.biases)

    def test_init_is_seeded(self):
        a, b = convnet.init_convnet(seed=4), convnet.init_convnet(seed=4)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        c = convnet.init_convnet(seed=5)
        assert not np.array_equal(a.weights[0], c.weights[0])

    @pytest.mark.parametrize("kw", [dict(layers=0), dict(width=0), dict(kernel_size=4)])
    def test_init_validation(self, kw):
        with pytest.raises(InvalidArgumentError):
            convnet.init_convnet(**kw)

    def test_model_validation(self):
        with pytest.raises(InvalidArgumentError, match="single output"):
            convnet.ConvNetModel([np.zeros((2, 1, 3, 3))], [np.zeros(2)])
        with pytest.raises(InvalidArgumentError, match="odd"):
            convnet.ConvNetModel([np.zeros((1, 1, 2, 2))], [np.zeros(1)])
        with pytest.raises(InvalidArgumentError):
            convnet.ConvNetModel([np.zeros((1, 2, 3, 3))], [np.zeros(1)])

    def test_parameter_round_trip(self):
        m = convnet.init_convnet(seed=1)
        again = m.with_parameters(m.parameters())
        assert all(np.array_equal(a, b) for a, b in zip(m.weights, again.weights))
        assert sorted(m.parameters()) == ["b0", "b1", "b2", "w0", "w1", "w2"]


class TestForward:
    def test_zero_weights(self, rng):
        m = convnet.init_convnet(seed=0)
        m = m.with_parameters({k: np.zeros_like(v) for k, v in m.parameters().items()})
        assert not convnet.cn_forward(m, rng.random((10, 10))).any()

    def test_delta_identity(self, rng):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        m = convnet.ConvNetModel([w], [np.zeros(1)])
        d = rng.random((9, 9))
        # FFT convolution: equal up to rounding
        np.testing.assert_allclose(convnet.cn_forward(m, d), d, rtol=0, atol=1e-15)

    def test_direct_summation_oracle(self, rng):
        weights = [rng.standard_normal((3, 1, 3, 3)), rng.standard_normal((1, 3, 5, 3))]
        biases = [rng.standard_normal(3) * 0.1, np.array([0.2])]
        m = convnet.ConvNetModel(weights, biases)
        d = rng.standard_normal((8, 8))
        ref = forward_direct(weights, biases, d)
        assert ref.any()
        np.testing.assert_allclose(convnet.cn_forward(m, d), ref, rtol=0, atol=1e-12)

    def test_output_nonnegative_and_shape(self, rng):
        m = convnet.init_convnet(seed=2)
        out = convnet.cn_forward(m, rng.standard_normal((4, 11, 13)))
        assert out.shape == (4, 11, 13) and out.min() >= 0

    def test_tape_matches_numpy(self, rng):
        m = convnet.init_convnet(seed=2)
        stack = rng.random((2, 10, 10))
        taped = convnet.cn_forward(m, stack, tape=Tape()).value[:, 0]
        np.testing.assert_array_equal(taped, convnet.cn_forward(m, stack))


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 7])
    def test_three_layer_on_12x12(self, seed):
        _, build, params = model_for_gradcheck("convnet", (12, 12), 3, seed=seed)
        assert gradient_check(build, params) <= 1e-4

    def test_data_initialised_model(self):
        ds = small_dataset(2)
        m = init_convnet_from_data(ds, 2, 4, 5, seed=1)
        images, targets = ds.stacked(), ds.targets()[:, None]
        assert gradient_check(lambda t, p: t.mse_loss(m.build(t, p, images), targets),
                              m.parameters(), max_coords=40) <= 1e-4


class TestDataInit:
    def test_untrained_output_is_thresholded_matched_filter(self):
        ds = small_dataset()
        m = init_convnet_from_data(ds, 3, 8, 7, seed=0, jitter=0.0)
        out = convnet.cn_forward(m, ds.stacked())
        gain = m.meta["psf_gain"]
        assert out.max() > 0
        # with zero jitter the network is relu(g * d / gain - level / gain)
        from spotkit import grid
        psf = grid.gaussian_kernel(m.meta["psf_sigma"], radius=3)
        unit = psf / psf.sum()
        ref = np.maximum(grid.correlate_same(ds.stacked(), unit) / gain
                         + m.biases[-1][0], 0.0)
        np.testing.assert_allclose(out, ref, atol=1e-14)

    def test_peaks_near_spots(self):
        ds = small_dataset(4)
        m = init_convnet_from_data(ds, 3, 8, 7, seed=0)
        out = convnet.cn_forward(m, ds.stacked())
        for o, spots in zip(out, ds.spots):
            cx, cy = spots[0, :2]
            iy, ix = np.unravel_index(np.argmax(o), o.shape)
            dists = np.hypot(spots[:, 0] - ix, spots[:, 1] - iy)
            assert dists.min() <= 2.0


class TestTraining:
    def cfg(self, **kw):
        base = dict(epochs=2, batch_size=4, seed=1)
        base.update(kw)
        return training.TrainConfig(**base)

    def test_zero_learning_rate(self):
        ds = small_dataset()
        m = init_convnet_from_data(ds, 2, 4, 5)
        best, _ = convnet.cn_train(m, ds, self.cfg(lr=0.0))
        for k, v in m.parameters().items():
            assert np.array_equal(best.parameters()[k], v)

    def test_descent_after_50_steps(self):
        ds = synth.make_dataset(synth.SceneSpec(seed=2), 32)
        m = init_convnet_from_data(ds, 3, 8, 7, seed=0)
        # 13 epochs of 4 mini-batches: 52 Adam steps
        cfg = training.TrainConfig(epochs=13, batch_size=8, val_frac=0.0, train_frac=1.0)
        _, hist = convnet.cn_train(m, ds, cfg)
        assert hist[-1]["train_loss"] < hist[0]["train_loss"]

    def test_deterministic_logs(self):
        ds = small_dataset()
        m = init_convnet_from_data(ds, 2, 4, 5)
        _, a = convnet.cn_train(m, ds, self.cfg())
        _, b = convnet.cn_train(m, ds, self.cfg())
        assert a == b

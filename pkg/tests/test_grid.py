import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import conv_direct, conv_matrix, shrink_bruteforce
from spotkit import grid
from spotkit.errors import InvalidArgumentError, NumericError


def random_kernel(rng, max_half=2):
    kh, kw = 2 * rng.integers(0, max_half + 1, size=2) + 1
    return rng.standard_normal((kh, kw))


class TestKernels:
    def test_even_kernel_rejected(self):
        with pytest.raises(InvalidArgumentError, match="odd"):
            grid.conv_same(np.zeros((4, 4)), np.ones((2, 3)))

    def test_psf_role_checks_sign_and_sum(self):
        grid.as_kernel(np.ones((3, 3)), role="psf")
        with pytest.raises(InvalidArgumentError):
            grid.as_kernel(-np.ones((3, 3)), role="psf")
        with pytest.raises(InvalidArgumentError):
            grid.as_kernel(np.zeros((3, 3)), role="psf")

    def test_nonfinite_kernel_rejected(self):
        k = np.ones((3, 3))
        k[1, 1] = np.nan
        with pytest.raises(InvalidArgumentError, match="non-finite"):
            grid.as_kernel(k)

    def test_kernel_larger_than_twice_image(self):
        with pytest.raises(InvalidArgumentError, match="does not fit"):
            grid.conv_same(np.zeros((2, 2)), np.ones((5, 5)))
        # exactly twice plus one is too big, twice minus one fits
        grid.conv_same(np.zeros((3, 3)), np.ones((5, 5)))

    def test_one_dimensional_image_rejected(self):
        with pytest.raises(InvalidArgumentError, match="shape"):
            grid.conv_same(np.zeros(5), np.ones((1, 1)))

    def test_unknown_boundary(self):
        with pytest.raises(InvalidArgumentError, match="boundary"):
            grid.conv_same(np.zeros((4, 4)), np.ones((3, 3)), boundary="reflect")

    @pytest.mark.parametrize("sigma", [0.5, 1.0, 2.3])
    def test_gaussian_kernel(self, sigma):
        g = grid.gaussian_kernel(sigma)
        r = int(np.ceil(3 * sigma))
        assert g.shape == (2 * r + 1, 2 * r + 1)
        assert g.sum() == pytest.approx(1.0)
        assert np.array_equal(g, grid.flip(g))
        assert g[r, r] == g.max()
        peak = grid.gaussian_kernel(sigma, normalize=False)
        assert peak[r, r] == 1.0

    def test_gaussian_kernel_rejects_bad_sigma(self):
        with pytest.raises(InvalidArgumentError):
            grid.gaussian_kernel(0.0)

    def test_embed_center_roundtrip(self, rng):
        k = rng.standard_normal((3, 5))
        big = grid.embed_center(k, (7, 9))
        assert big[2:5, 2:7].tolist() == k.tolist()
        assert np.abs(big).sum() == pytest.approx(np.abs(k).sum())
        assert np.array_equal(grid.embed_center(big, (3, 5)), k)


class TestConvSame:
    def test_identity_kernel(self, rng):
        img = rng.standard_normal((5, 7))
        assert np.array_equal(grid.conv_same(img, [[1.0]]), img)

    def test_zero_image(self, rng):
        out = grid.conv_same(np.zeros((3, 3)), rng.standard_normal((3, 3)))
        assert np.array_equal(out, np.zeros((3, 3)))

    def test_ramp_with_averaging_kernel(self):
        img = np.arange(16, dtype=float).reshape(4, 4)
        k = np.full((3, 3), 1.0 / 9.0)
        np.testing.assert_allclose(grid.conv_same(img, k), conv_direct(img, k), rtol=0, atol=1e-13)
        # corner sees the 2x2 block {0, 1, 4, 5}
        assert grid.conv_same(img, k)[0, 0] == pytest.approx(10.0 / 9.0)

    @pytest.mark.parametrize("boundary", grid.BOUNDARIES)
    @pytest.mark.parametrize("shape,kshape", [((6, 6), (3, 3)), ((5, 8), (5, 3)),
                                               ((4, 4), (7, 7)), ((9, 3), (1, 5))])
    def test_matches_nested_loop(self, rng, boundary, shape, kshape):
        img = rng.standard_normal(shape)
        k = rng.standard_normal(kshape)
        np.testing.assert_allclose(grid.conv_same(img, k, boundary),
                                   conv_direct(img, k, boundary), rtol=0, atol=1e-12)

    def test_flipped_kernel_convention(self):
        img = np.zeros((5, 5))
        img[2, 2] = 1.0
        k = np.arange(9, dtype=float).reshape(3, 3)
        # an impulse response of a true convolution is the kernel itself
        np.testing.assert_allclose(grid.conv_same(img, k)[1:4, 1:4], k, atol=1e-14)
        np.testing.assert_allclose(grid.correlate_same(img, k)[1:4, 1:4], grid.flip(k),
                                   atol=1e-14)

    def test_batched_matches_loop(self, rng):
        stack = rng.standard_normal((3, 2, 6, 7))
        k = rng.standard_normal((3, 5))
        out = grid.conv_same(stack, k)
        assert out.shape == stack.shape
        for idx in np.ndindex(3, 2):
            np.testing.assert_allclose(out[idx], conv_direct(stack[idx], k), atol=1e-12)

    def test_bilinear(self, rng):
        x, y = rng.standard_normal((2, 6, 6))
        k, m = rng.standard_normal((2, 3, 3))
        np.testing.assert_allclose(grid.conv_same(2 * x - y, k),
                                   2 * grid.conv_same(x, k) - grid.conv_same(y, k), atol=1e-12)
        np.testing.assert_allclose(grid.conv_same(x, k + 3 * m),
                                   grid.conv_same(x, k) + 3 * grid.conv_same(x, m), atol=1e-12)

    def test_pure(self, rng):
        img = rng.standard_normal((8, 8))
        k = rng.standard_normal((3, 3))
        a = grid.conv_same(img, k)
        b = grid.conv_same(img.copy(), k.copy())
        assert a.tobytes() == b.tobytes()


class TestCorrelateSame:
    def test_symmetric_kernel(self, rng):
        img = rng.standard_normal((7, 7))
        k = grid.gaussian_kernel(1.0)
        np.testing.assert_allclose(grid.correlate_same(img, k), grid.conv_same(img, k),
                                   atol=1e-14)

    def test_scalar_kernel(self, rng):
        img = rng.standard_normal((4, 5))
        np.testing.assert_allclose(grid.correlate_same(img, [[2.5]]), 2.5 * img, atol=1e-15)

    @pytest.mark.parametrize("boundary", grid.BOUNDARIES)
    def test_is_conv_with_flipped_kernel(self, rng, boundary):
        img = rng.standard_normal((6, 7))
        k = rng.standard_normal((3, 5))
        np.testing.assert_allclose(grid.correlate_same(img, k, boundary),
                                   grid.conv_same(img, grid.flip(k), boundary), atol=1e-13)

    @pytest.mark.parametrize("boundary", grid.BOUNDARIES)
    def test_adjoint_via_dense_matrix(self, rng, boundary):
        img = rng.standard_normal((6, 6))
        k = rng.standard_normal((3, 3))
        M = conv_matrix((6, 6), k, boundary)
        np.testing.assert_allclose(grid.correlate_same(img, k, boundary).ravel(),
                                   M.T @ img.ravel(), rtol=0, atol=1e-12)
        y = rng.standard_normal((6, 6))
        lhs = np.vdot(grid.conv_same(img, k, boundary), y)
        rhs = np.vdot(img, grid.correlate_same(y, k, boundary))
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(h=st.integers(1, 9), w=st.integers(1, 9), half=st.integers(0, 3),
           seed=st.integers(0, 2**32 - 1), boundary=st.sampled_from(grid.BOUNDARIES))
    def test_adjoint_property(self, h, w, half, seed, boundary):
        r = np.random.default_rng(seed)
        k = r.standard_normal((2 * half + 1, 2 * min(half, 1) + 1))
        if k.shape[0] > 2 * h or k.shape[1] > 2 * w:
            return
        x, y = r.standard_normal((2, h, w))
        lhs = np.vdot(grid.conv_same(x, k, boundary), y)
        rhs = np.vdot(x, grid.correlate_same(y, k, boundary))
        scale = np.linalg.norm(x) * np.linalg.norm(y) * np.abs(k).sum()
        assert abs(lhs - rhs) <= 1e-12 * scale


class TestPeriodicFFT:
    def test_delta_is_identity(self, rng):
        img = rng.standard_normal((6, 9))
        np.testing.assert_allclose(grid.conv_fft_periodic(img, [[0, 0, 0], [0, 1, 0], [0, 0, 0]]),
                                   img, atol=1e-14)

    def test_constant_image(self, rng):
        k = rng.standard_normal((5, 3))
        out = grid.conv_fft_periodic(np.full((8, 8), 2.0), k)
        np.testing.assert_allclose(out, 2.0 * k.sum(), atol=1e-13)

    def test_matches_direct_periodic(self, rng):
        img = rng.standard_normal((8, 8))
        k = rng.standard_normal((5, 5))
        ref = conv_direct(img, k, "periodic")
        out = grid.conv_fft_periodic(img, k)
        assert np.abs(out - ref).max() <= 1e-10 * np.abs(ref).max()

    def test_kernel_wider_than_image_wraps(self, rng):
        img = rng.standard_normal((3, 4))
        k = rng.standard_normal((5, 7))
        np.testing.assert_allclose(grid.conv_fft_periodic(img, k),
                                   conv_direct(img, k, "periodic"), atol=1e-12)

    @pytest.mark.parametrize("shape", [(16, 16), (33, 20), (64, 64)])
    def test_matches_conv_same_periodic(self, rng, shape):
        img = rng.standard_normal(shape)
        k = random_kernel(rng, 3)
        ref = grid.conv_same(img, k, "periodic")
        assert np.abs(grid.conv_fft_periodic(img, k) - ref).max() <= 1e-10 * np.abs(ref).max()


class TestShrink:
    def test_definition_example(self):
        out = grid.shrink_nonneg(np.array([-2.0, 0.0, 0.5, 1.5]), 0.5)
        assert out.tolist() == [0.0, 0.0, 0.0, 1.0]

    def test_zero_theta_identity_on_nonneg(self, rng):
        v = rng.random((4, 4))
        assert np.array_equal(grid.shrink_nonneg(v, 0.0), v)

    def test_idempotent_at_zero_theta(self, rng):
        v = rng.standard_normal((5, 5))
        once = grid.shrink_nonneg(v, 0.0)
        assert np.array_equal(grid.shrink_nonneg(once, 0.0), once)

    def test_scalar_prox_oracle(self):
        assert grid.shrink_nonneg(np.array([0.7]), 0.3)[0] == pytest.approx(0.4)
        assert abs(shrink_bruteforce(0.7, 0.3) - 0.4) <= 2e-4

    @pytest.mark.parametrize("theta", [-1e-9, -1.0, np.nan, np.inf])
    def test_bad_theta(self, theta):
        with pytest.raises(InvalidArgumentError, match="theta"):
            grid.shrink_nonneg(np.ones(3), theta)

    @settings(max_examples=100, deadline=None)
    @given(v=st.floats(-3, 3), theta=st.floats(0, 2))
    def test_matches_bruteforce(self, v, theta):
        got = grid.shrink_nonneg(np.array([v]), theta)[0]
        assert abs(got - shrink_bruteforce(v, theta, step=1e-3)) <= 1e-3

    @given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)), st.floats(0, 10))
    def test_range_and_contraction(self, v, theta):
        out = grid.shrink_nonneg(v, theta)
        assert np.all(out >= 0)
        assert np.all(out <= np.maximum(v, 0))


def dense_norm_sq(kernels, shape):
    M = np.hstack([conv_matrix(shape, k, "periodic") for k in kernels])
    return np.linalg.norm(M, 2) ** 2


class TestOperatorNorm:
    def test_identity(self):
        assert grid.operator_norm_sq([[[1.0]]]) == pytest.approx(1.0, rel=1e-12)

    def test_averaging_kernel_dense_oracle(self):
        k = np.full((3, 3), 1.0 / 9.0)
        ref = dense_norm_sq([k], (8, 8))
        assert ref == pytest.approx(1.0, rel=1e-12)
        assert grid.operator_norm_sq([k], shape=(8, 8)) == pytest.approx(ref, rel=1e-4)

    @pytest.mark.parametrize("seed", range(4))
    def test_random_kernels_dense_oracle(self, seed):
        r = np.random.default_rng(seed)
        kernels = [r.standard_normal((3, 3)), r.random((5, 5))]
        for shape in [(8, 8), (7, 6)]:
            ref = dense_norm_sq(kernels, shape)
            got = grid.operator_norm_sq(kernels, shape=shape, tol=1e-10, max_iter=5000)
            assert got == pytest.approx(ref, rel=1e-4)

    def test_background_path(self):
        a = grid.gaussian_kernel(1.0)
        gb = grid.gaussian_kernel(1.5)
        ref = dense_norm_sq([a, 0.5 * gb], (8, 8))
        got = grid.operator_norm_sq([a], 0.5, background_kernel=gb, shape=(8, 8))
        assert got == pytest.approx(ref, rel=1e-4)

    def test_homogeneity(self, rng):
        k = rng.random((3, 3))
        base = grid.operator_norm_sq([k], tol=1e-10, max_iter=5000)
        assert grid.operator_norm_sq([3.0 * k], tol=1e-10, max_iter=5000) == pytest.approx(
            9.0 * base, rel=1e-6)

    def test_default_grid_bounds_zero_padded_operator(self, rng):
        # the periodic norm on a grid that fits the kernel bounds the
        # zero-boundary norm on any smaller grid
        k = rng.standard_normal((5, 5))
        zero = np.linalg.norm(conv_matrix((6, 6), k, "zero"), 2) ** 2
        assert grid.operator_norm_sq([k], tol=1e-10, max_iter=5000) >= zero * (1 - 1e-6)

    def test_nonconvergence_carries_estimate(self, rng):
        with pytest.raises(NumericError) as info:
            grid.operator_norm_sq([rng.standard_normal((3, 3))], tol=0.0, max_iter=3)
        assert info.value.last_estimate > 0

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            grid.operator_norm_sq([])
        with pytest.raises(InvalidArgumentError):
            grid.operator_norm_sq([np.ones((3, 3))], 1.0)
        with pytest.raises(InvalidArgumentError):
            grid.operator_norm_sq([np.zeros((3, 3))])

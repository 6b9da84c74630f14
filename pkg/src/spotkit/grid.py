"""Dense 2-D grid arithmetic.

Images, feature maps and kernels are plain ``float64`` numpy arrays. Every
image operation accepts arrays of shape ``(..., H, W)`` and acts on the last
two axes, so a stack of images is processed in one call. Kernels are 2-D with
odd height and width; their centre pixel is ``(kh // 2, kw // 2)``.

Convolution follows the flipped-kernel convention::

    conv_same(x, k)[i, j] = sum_{u,v} k[u, v] * x[i - (u - ch), j - (v - cw)]

and :func:`correlate_same` is its exact adjoint for the same boundary mode.
"""

import math

import numpy as np
from scipy import fft as sfft
from scipy.signal import fftconvolve

from .errors import InvalidArgumentError, NumericError

BOUNDARIES = ("zero", "periodic")


def as_grid(image, name="image"):
    """Return ``image`` as a float64 array with at least two axes."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-1] < 1 or arr.shape[-2] < 1:
        raise InvalidArgumentError(f"{name} must have shape (..., H, W), got {arr.shape}")
    return arr


def as_kernel(k, role="learned", name="kernel"):
    """Validate a kernel and return it as a 2-D float64 array.

    ``role="psf"`` additionally requires non-negative entries with a strictly
    positive sum.
    """
    arr = np.asarray(k, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {arr.shape}")
    kh, kw = arr.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidArgumentError(f"{name} must have odd height and width, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    if role == "psf":
        if np.any(arr < 0) or not arr.sum() > 0:
            raise InvalidArgumentError("psf kernel must be non-negative with positive sum")
    elif role != "learned":
        raise InvalidArgumentError(f"unknown kernel role {role!r}")
    return arr


def gaussian_kernel(sigma, radius=None, normalize=True):
    """Sampled isotropic Gaussian on a ``(2r+1) x (2r+1)`` grid.

    ``radius`` defaults to ``ceil(3 * sigma)``. With ``normalize`` the kernel
    sums to one; otherwise its peak is one.
    """
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    r = int(math.ceil(3.0 * sigma)) if radius is None else int(radius)
    if r < 0:
        raise InvalidArgumentError(f"radius must be >= 0, got {radius}")
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2.0 * sigma * sigma))
    if normalize:
        g /= g.sum()
    return g


def flip(k):
    """Rotate a kernel by 180 degrees."""
    return np.ascontiguousarray(np.asarray(k)[::-1, ::-1])


def embed_center(k, shape):
    """Place ``k`` centred in a zero array of odd ``shape``, cropping if needed."""
    kh, kw = k.shape
    h, w = shape
    if h % 2 == 0 or w % 2 == 0:
        raise InvalidArgumentError(f"target shape must be odd, got {shape}")
    out = np.zeros((h, w), dtype=np.float64)
    # offsets between the two centres, clipped to the overlapping window
    dh, dw = h // 2 - kh // 2, w // 2 - kw // 2
    src_r = slice(max(0, -dh), min(kh, h - dh))
    src_c = slice(max(0, -dw), min(kw, w - dw))
    dst_r = slice(max(0, dh), max(0, dh) + (src_r.stop - src_r.start))
    dst_c = slice(max(0, dw), max(0, dw) + (src_c.stop - src_c.start))
    out[dst_r, dst_c] = k[src_r, src_c]
    return out


def _check_pair(image, k, boundary):
    if boundary not in BOUNDARIES:
        raise InvalidArgumentError(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")
    image = as_grid(image)
    k = as_kernel(k)
    h, w = image.shape[-2:]
    if k.shape[0] > 2 * h or k.shape[1] > 2 * w:
        raise InvalidArgumentError(
            f"kernel {k.shape} does not fit within twice the image extent {(h, w)}"
        )
    return image, k


def pad_same(image, kshape, boundary):
    """Pad the last two axes by the half-widths of a kernel of ``kshape``."""
    ph, pw = kshape[0] // 2, kshape[1] // 2
    if boundary == "zero":
        h, w = image.shape[-2:]
        out = np.zeros(image.shape[:-2] + (h + 2 * ph, w + 2 * pw))
        out[..., ph:ph + h, pw:pw + w] = image
        return out
    widths = [(0, 0)] * (image.ndim - 2) + [(ph, ph), (pw, pw)]
    mode = "constant" if boundary == "zero" else "wrap"
    return np.pad(image, widths, mode=mode)


def correlate_valid(a, b):
    """Valid-mode cross-correlation over the last two axes with broadcasting.

    ``a`` must be at least as large as ``b`` along both spatial axes.
    """
    nd = max(a.ndim, b.ndim)
    a = a.reshape((1,) * (nd - a.ndim) + a.shape)
    b = b.reshape((1,) * (nd - b.ndim) + b.shape)
    return fftconvolve(a, b[..., ::-1, ::-1], mode="valid", axes=(-2, -1))


def correlate_same(image, k, boundary="zero"):
    """Cross-correlate ``image`` with ``k``; output has the image's shape."""
    image, k = _check_pair(image, k, boundary)
    out = correlate_valid(pad_same(image, k.shape, boundary), k)
    return np.ascontiguousarray(out)


def conv_same(image, k, boundary="zero"):
    """True (flipped-kernel) convolution; output has the image's shape."""
    image, k = _check_pair(image, k, boundary)
    out = correlate_valid(pad_same(image, k.shape, boundary), flip(k))
    return np.ascontiguousarray(out)


def kernel_gradient(padded, upstream):
    """Gradient of ``sum(upstream * correlate_valid(padded, k))`` w.r.t. ``k``.

    Leading axes are summed, so a batch of images yields one kernel gradient.
    """
    g = correlate_valid(padded, upstream)
    if g.ndim > 2:
        g = g.reshape((-1,) + g.shape[-2:]).sum(axis=0)
    return g


def _wrap_kernel(k, shape):
    """Fold a centred kernel onto a periodic grid of ``shape`` (origin at 0,0)."""
    h, w = shape
    kh, kw = k.shape
    rows = (np.arange(kh) - kh // 2) % h
    cols = (np.arange(kw) - kw // 2) % w
    out = np.zeros((h, w), dtype=np.float64)
    np.add.at(out, (rows[:, None], cols[None, :]), k)
    return out


def conv_fft_periodic(image, k):
    """Periodic convolution through the 2-D real FFT."""
    image = as_grid(image)
    k = as_kernel(k)
    shape = image.shape[-2:]
    kf = sfft.rfft2(_wrap_kernel(k, shape))
    out = sfft.irfft2(sfft.rfft2(image, axes=(-2, -1)) * kf, s=shape, axes=(-2, -1))
    return out


def shrink_nonneg(v, theta):
    """Proximal map of ``theta * sum(u) + indicator(u >= 0)``: ``max(v - theta, 0)``."""
    theta = float(theta)
    if theta < 0 or not math.isfinite(theta):
        raise InvalidArgumentError(f"theta must be a finite non-negative scalar, got {theta}")
    return np.maximum(np.asarray(v, dtype=np.float64) - theta, 0.0)


def _start_vector(shape):
    """All-ones grid with a small deterministic ripple (avoids orthogonal starts)."""
    i = np.arange(shape[0], dtype=np.float64)[:, None]
    j = np.arange(shape[1], dtype=np.float64)[None, :]
    return 1.0 + 1e-3 * np.cos(1.3 * i + 0.7 * j + 0.1 * i * j)


def operator_norm_sq(kernels, background_gain=0.0, *, background_kernel=None,
                     shape=None, tol=1e-6, max_iter=500):
    """Squared spectral norm of the stacked periodic synthesis operator.

    The operator maps coefficient maps ``(x_1, ..., x_n, c)`` to
    ``sum_i k_i * x_i + background_gain * (background_kernel * c)``, all
    convolutions periodic on a grid of ``shape``. The result is the Lipschitz
    constant of the gradient of ``0.5 * ||d - M z||^2``.

    ``shape`` defaults to the smallest grid of at least 16 x 16 that holds
    every kernel. Power iteration stops once the Rayleigh quotient changes by
    less than ``tol`` relative; after ``max_iter`` iterations a
    :class:`NumericError` carrying the last estimate is raised.
    """
    kernels = [as_kernel(k) for k in kernels]
    if not kernels:
        raise InvalidArgumentError("kernel list must be non-empty")
    gain = float(background_gain)
    if gain < 0:
        raise InvalidArgumentError(f"background_gain must be >= 0, got {gain}")
    ops = list(kernels)
    if gain > 0:
        if background_kernel is None:
            raise InvalidArgumentError("background_gain > 0 requires background_kernel")
        ops.append(gain * as_kernel(background_kernel))
    if shape is None:
        shape = (max(16, *(k.shape[0] for k in ops)), max(16, *(k.shape[1] for k in ops)))
    shape = (int(shape[0]), int(shape[1]))

    spectra = np.stack([sfft.rfft2(_wrap_kernel(k, shape)) for k in ops])

    def normal_op(v):
        forward = (sfft.rfft2(v, axes=(-2, -1)) * spectra).sum(axis=0)
        back = np.conj(spectra) * forward[None]
        return sfft.irfft2(back, s=shape, axes=(-2, -1))

    v = np.stack([_start_vector(shape)] * len(ops))
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iter):
        w = normal_op(v)
        new = float(np.vdot(v, w))
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise InvalidArgumentError("operator is identically zero")
        v = w / norm
        if abs(new - estimate) <= tol * abs(new):
            return new
        estimate = new
    raise NumericError(
        f"power iteration did not converge in {max_iter} iterations", last_estimate=estimate
    )

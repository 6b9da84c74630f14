"""Model construction helpers shared by the CLI and the test-suite."""

import math

import numpy as np

from . import grid, synth
from .convnet import init_convnet
from .spotnet import init_from_psf


def psf_from_spots(spots, radius):
    """Gain-calibrated Gaussian PSF estimated from ground-truth spot tables.

    The kernel has the median spot width and sums to the median spot mass
    ``amplitude * 2 pi sigma^2``, so a unit coefficient renders a typical
    spot and sparse codes are on the scale of the unit-mass targets.
    """
    table = np.concatenate([np.asarray(s).reshape(-1, 4) for s in spots] or [np.zeros((0, 4))])
    if len(table):
        sigma = float(np.median(table[:, 3]))
        gain = float(np.median(table[:, 2] * 2.0 * math.pi * table[:, 3] ** 2))
    else:
        sigma, gain = 1.5, 1.0
    return gain * grid.gaussian_kernel(sigma, radius=radius), sigma, gain


def init_spotnet_from_data(dataset, layers, kernel_size, tied=False):
    """ISTA-initialised SpotNet with PSF and threshold estimated from ``dataset``.

    The PSF radius is the largest for which the autocorrelation fits the
    state filter, so the untrained network is exactly truncated ISTA. The
    l1 weight puts the first-layer threshold at the median PSF-smoothed
    intensity, which removes most of the background at initialisation.
    """
    radius = max(1, (kernel_size - 1) // 4)
    psf, sigma, gain = psf_from_spots(dataset.spots, radius)
    unit = psf / psf.sum()
    level = float(np.median([np.median(grid.correlate_same(im, unit)) for im in dataset.images]))
    lam = gain * max(level, 1e-12)
    model = init_from_psf(psf, lam, layers, kernel_size, tied=tied)
    model.meta.update(psf_sigma=sigma, psf_gain=gain)
    return model


def init_convnet_from_data(dataset, layers=3, width=8, kernel_size=7, seed=0, jitter=0.1):
    """CNN initialised as a thresholded matched filter plus small random weights.

    Hidden layers carry the image through channel 0 with delta kernels, and
    the output layer correlates it with the estimated unit-mass PSF, scaled
    to the target mass and offset by the median smoothed intensity. The
    remaining weights are the uniform init of :func:`init_convnet` scaled by
    ``jitter``. A plain random start tends to drive every output ReLU
    inactive within a few epochs, after which no gradient flows.
    """
    model = init_convnet(layers, width, kernel_size, seed=seed)
    r = kernel_size // 2
    psf, sigma, gain = psf_from_spots(dataset.spots, r)
    unit = psf / psf.sum()
    level = float(np.median([np.median(grid.correlate_same(im, unit)) for im in dataset.images]))
    for i, w in enumerate(model.weights):
        w *= jitter
        if i < layers - 1:
            w[0, 0, r, r] += 1.0
    model.weights[-1][0, 0] += grid.flip(unit) / gain
    model.biases[-1][:] = -level / gain
    model.meta.update(psf_sigma=sigma, psf_gain=gain)
    return model


def gradcheck_scene(size, seed):
    h, w = size
    spec = synth.SceneSpec(height=h, width=w, n_min=1, n_max=2 if min(size) >= 12 else 1, amp_min=0.4, amp_max=0.8,
                           sigma_min=0.8, sigma_max=1.0, min_separation=2.0,
                           bg_beta=0.15, bg_sigma=4.0, noise_std=0.05, seed=seed)
    ds = synth.make_dataset(spec, 2)
    return ds.stacked(), ds.targets(1.0)


def model_for_gradcheck(net, size, layers, seed, kernel_size=None, width=8):
    """A model, loss builder and parameter point for :func:`gradient_check`.

    Parameters are jittered away from their initial values (seeded) so the
    check runs at a generic point.
    """
    images, targets = gradcheck_scene(size, seed)
    rng = np.random.default_rng(seed)
    if net == "spotnet":
        ks = kernel_size or min(11, 2 * (min(size) // 2) - 1)
        model = init_spotnet_from_data(synth.Dataset(list(images), [np.zeros((0, 4))] * 2),
                                       layers, ks)
        params = {k: v + (0.01 * rng.standard_normal(v.shape) * np.abs(v).max() if v.ndim else 0)
                  for k, v in model.parameters().items()}
    else:
        model = init_convnet(layers, width, kernel_size or 7, seed=seed)
        params = model.parameters()
        for k in params:
            if k.startswith("b"):
                params[k] = params[k] + 0.05 * rng.random(params[k].shape)
    model.clamp(params)

    def build(tape, leaves):
        pred = model.build(tape, leaves, images)
        return tape.mse_loss(pred, targets.reshape(pred.shape))

    return model, build, params

"""Synthetic immunoassay images with exact ground truth.

An image is a sum of Gaussian spots at subpixel centres, a smooth
non-negative background and i.i.d. Gaussian read noise, clamped at zero.
Pixel ``(i, j)`` has its centre at ``x = j, y = i``.

Each image is a pure function of ``(spec.seed, index)``: the per-image
random stream is seeded with ``seed XOR (index * 0x9E3779B97F4A7C15)``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, InvalidArgumentError
from .grid import conv_fft_periodic, gaussian_kernel

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
MAX_ATTEMPTS = 10_000
TRUNCATION = 4.0


def stream_seed(seed, index):
    """Mix a dataset seed and an image index into an independent stream seed."""
    return (int(seed) ^ ((int(index) * GOLDEN_GAMMA) & MASK64)) & MASK64


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the synthetic scene distribution.

    Intensities are in arbitrary units, lengths in pixels. The defaults are
    a desk-scale setting with moderate signal-to-noise.
    """

    height: int = 32
    width: int = 32
    n_min: int = 1
    n_max: int = 5
    amp_min: float = 0.4
    amp_max: float = 0.8
    sigma_min: float = 1.0
    sigma_max: float = 2.0
    min_separation: float = 6.0
    margin: float | None = None
    bg_beta: float = 0.15
    bg_sigma: float = 6.0
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.margin is None:
            object.__setattr__(self, "margin", float(math.ceil(3.0 * self.sigma_max)))
        self.validate()

    def validate(self):
        problems = []
        if self.height < 8 or self.width < 8:
            problems.append("grid must be at least 8x8")
        if not 0 <= self.n_min <= self.n_max:
            problems.append("need 0 <= n_min <= n_max")
        if not 0 < self.amp_min <= self.amp_max:
            problems.append("need 0 < amp_min <= amp_max")
        if not 0 < self.sigma_min <= self.sigma_max:
            problems.append("need 0 < sigma_min <= sigma_max")
        if self.noise_std < 0 or self.bg_beta < 0 or self.min_separation < 0:
            problems.append("noise_std, bg_beta and min_separation must be >= 0")
        if self.bg_beta > 0 and not self.bg_sigma > 0:
            problems.append("bg_sigma must be positive")
        if self.margin < math.ceil(3.0 * self.sigma_max):
            problems.append("margin must be >= ceil(3 * sigma_max)")
        if 2 * self.margin > min(self.height, self.width) - 1:
            problems.append("margin leaves no room for spot centres")
        if not 0 <= self.seed <= MASK64:
            problems.append("seed must fit in 64 bits")
        if problems:
            raise InvalidArgumentError("invalid SceneSpec: " + "; ".join(problems))


@dataclass
class Scene:
    """Ground truth for one image.

    ``spots`` has one row ``(cx, cy, amplitude, sigma)`` per spot.
    """

    spots: np.ndarray
    background: np.ndarray
    noise_seed: int
    index: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def centers(self):
        return self.spots[:, :2]


def _sample_background(rng, spec):
    if spec.bg_beta == 0:
        return np.zeros((spec.height, spec.width))
    white = rng.standard_normal((spec.height, spec.width))
    smooth = conv_fft_periodic(white, gaussian_kernel(spec.bg_sigma))
    lo, hi = smooth.min(), smooth.max()
    unit = (smooth - lo) / (hi - lo) if hi > lo else np.zeros_like(smooth)
    return spec.bg_beta * unit


def sample_scene(spec, index):
    """Draw the ground truth for image ``index`` of the dataset ``spec``."""
    rng = _rng(stream_seed(spec.seed, index))
    n = int(rng.integers(spec.n_min, spec.n_max + 1))
    lo_x, hi_x = spec.margin, spec.width - 1 - spec.margin
    lo_y, hi_y = spec.margin, spec.height - 1 - spec.margin
    centers = []
    attempts = 0
    sep2 = spec.min_separation ** 2
    while len(centers) < n:
        if attempts >= MAX_ATTEMPTS:
            raise GenerationError(
                f"image {index}: could not place {n} spots with separation "
                f"{spec.min_separation} after {MAX_ATTEMPTS} attempts")
        attempts += 1
        cx = rng.uniform(lo_x, hi_x)
        cy = rng.uniform(lo_y, hi_y)
        if all((cx - px) ** 2 + (cy - py) ** 2 >= sep2 for px, py in centers):
            centers.append((cx, cy))
    amps = rng.uniform(spec.amp_min, spec.amp_max, size=n)
    sigmas = rng.uniform(spec.sigma_min, spec.sigma_max, size=n)
    spots = np.zeros((n, 4))
    if n:
        spots[:, :2] = centers
        spots[:, 2] = amps
        spots[:, 3] = sigmas
    background = _sample_background(rng, spec)
    noise_seed = int(rng.integers(0, MASK64, dtype=np.uint64, endpoint=True))
    return Scene(spots=spots, background=background, noise_seed=noise_seed, index=index)


def _splat(shape, spots, sigmas, weights):
    """Sum of truncated Gaussians ``w * exp(-r^2 / 2 s^2)`` sampled at pixel centres."""
    h, w = shape
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros(shape)
    for (cx, cy), s, wt in zip(spots, sigmas, weights):
        r2 = (xx - cx) ** 2 + (yy - cy) ** 2
        blob = wt * np.exp(-r2 / (2.0 * s * s))
        out += np.where(r2 <= (TRUNCATION * s) ** 2, blob, 0.0)
    return out


def render_clean(scene, spec):
    """Noise-free image: spots plus background."""
    spots = scene.spots
    clean = _splat((spec.height, spec.width), spots[:, :2], spots[:, 3], spots[:, 2])
    return clean + scene.background


def render_image(scene, spec):
    """Observed image: spots, background and read noise, clamped at zero."""
    img = render_clean(scene, spec)
    if spec.noise_std > 0:
        img = img + spec.noise_std * _rng(scene.noise_seed).standard_normal(img.shape)
    return np.maximum(img, 0.0)


def presence_map(spots, shape, target_sigma=1.0, amplitude_weighted=False):
    """Unit-mass Gaussian of width ``target_sigma`` at each ``(cx, cy, ...)`` row."""
    if not target_sigma > 0:
        raise InvalidArgumentError(f"target_sigma must be positive, got {target_sigma}")
    spots = np.asarray(spots, dtype=np.float64).reshape(-1, 4)
    n = len(spots)
    mass = spots[:, 2] if amplitude_weighted else np.ones(n)
    weights = mass / (2.0 * math.pi * target_sigma ** 2)
    return _splat(tuple(shape), spots[:, :2], np.full(n, float(target_sigma)), weights)


def render_target(scene, spec, target_sigma=1.0, amplitude_weighted=False):
    """Noiseless, background-free presence map used as the training target."""
    return presence_map(scene.spots, (spec.height, spec.width), target_sigma,
                        amplitude_weighted)


@dataclass
class Dataset:
    """Images with their ground-truth spot tables, as stored on disk."""

    images: list
    spots: list

    def __post_init__(self):
        if len(self.images) != len(self.spots):
            raise InvalidArgumentError("images and spot tables differ in length")

    def __len__(self):
        return len(self.images)

    def subset(self, indices):
        return Dataset([self.images[i] for i in indices], [self.spots[i] for i in indices])

    def stacked(self):
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise InvalidArgumentError(f"images differ in shape: {sorted(shapes)}")
        return np.stack([np.asarray(im, dtype=np.float64) for im in self.images])

    def targets(self, target_sigma=1.0):
        return np.stack([presence_map(sp, im.shape, target_sigma)
                         for im, sp in zip(self.images, self.spots)])


def make_dataset(spec, count, start=0):
    """Generate images ``start .. start+count-1`` of ``spec`` as a :class:`Dataset`."""
    scenes = [sample_scene(spec, i) for i in range(start, start + count)]
    images = [render_image(s, spec) for s in scenes]
    return Dataset(images, [s.spots.copy() for s in scenes])

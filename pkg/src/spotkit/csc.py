"""Convolutional sparse coding with a smooth background.

Solves::

    minimise  0.5 * || d - a * x - gamma * (g_b * c) ||^2 + lam * sum(x)
    subject to x >= 0

where ``a`` is the PSF, ``g_b`` a broad Gaussian and ``*`` the full linear
convolution. The observation ``d`` is taken to be dark outside the frame:
residuals live on the frame padded by the largest kernel half-width, and
``d`` is zero-extended onto that grid. With this convention the normal
operator ``A^T A`` is exactly a zero-padded convolution with the PSF
autocorrelation, which is what an unrolled network layer applies.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import grid
from .errors import InvalidArgumentError


@dataclass
class CscProblem:
    d: np.ndarray
    psf: np.ndarray
    lam: float
    gamma: float = 0.0
    bg_sigma: float = 8.0
    bg_kernel: np.ndarray | None = None

    def __post_init__(self):
        self.d = grid.as_grid(self.d, "observation")
        if self.d.ndim != 2:
            raise InvalidArgumentError(f"observation must be 2-D, got {self.d.shape}")
        self.psf = grid.as_kernel(self.psf, role="psf", name="psf")
        if not self.lam >= 0:
            raise InvalidArgumentError(f"lambda must be >= 0, got {self.lam}")
        if not self.gamma >= 0:
            raise InvalidArgumentError(f"gamma must be >= 0, got {self.gamma}")
        if self.bg_kernel is None:
            self.bg_kernel = grid.gaussian_kernel(self.bg_sigma)
        self.bg_kernel = grid.as_kernel(self.bg_kernel, name="background kernel")

    @property
    def shape(self):
        return self.d.shape

    @property
    def pad(self):
        kernels = [self.psf] + ([self.bg_kernel] if self.gamma > 0 else [])
        return (max(k.shape[0] // 2 for k in kernels), max(k.shape[1] // 2 for k in kernels))

    def embed(self, img):
        ph, pw = self.pad
        h, w = np.shape(img)
        out = np.zeros((h + 2 * ph, w + 2 * pw))
        out[ph:ph + h, pw:pw + w] = img
        return out

    def crop(self, img):
        ph, pw = self.pad
        h, w = self.shape
        return img[ph:ph + h, pw:pw + w]

    def synthesize(self, x, c):
        """Model image ``a * x + gamma * g_b * c`` on the padded grid."""
        out = grid.conv_same(self.embed(x), self.psf)
        if self.gamma > 0:
            out = out + self.gamma * grid.conv_same(self.embed(c), self.bg_kernel)
        return out

    def adjoint(self, r):
        """Adjoint of :meth:`synthesize`: returns ``(A^T r, gamma G^T r)``."""
        gx = self.crop(grid.correlate_same(r, self.psf))
        if self.gamma > 0:
            gc = self.gamma * self.crop(grid.correlate_same(r, self.bg_kernel))
        else:
            gc = np.zeros(self.shape)
        return gx, gc

    def lipschitz(self):
        """Squared norm of the synthesis operator, via periodic power iteration.

        The periodic grid is the padded frame, large enough that full
        convolutions never wrap, so the result bounds the true constant.
        """
        ph, pw = self.pad
        h, w = self.shape
        return grid.operator_norm_sq([self.psf], self.gamma, background_kernel=self.bg_kernel,
                                     shape=(h + 2 * ph, w + 2 * pw))


@dataclass
class CscState:
    x: np.ndarray
    c: np.ndarray
    x_prev: np.ndarray
    c_prev: np.ndarray
    t: float = 1.0
    iteration: int = 0
    objective: float = math.nan
    history: list = field(default_factory=list)


def _check_shapes(p, x, c):
    if np.shape(x) != p.shape or np.shape(c) != p.shape:
        raise InvalidArgumentError(
            f"x {np.shape(x)} and c {np.shape(c)} must match observation {p.shape}")


def objective(p, x, c):
    """Data fit plus l1 penalty at ``(x, c)``."""
    _check_shapes(p, x, c)
    r = p.synthesize(x, c) - p.embed(p.d)
    return 0.5 * float(np.sum(r * r)) + p.lam * float(np.sum(np.abs(x)))


def initial_state(p):
    z = np.zeros(p.shape)
    return CscState(x=z, c=z.copy(), x_prev=z.copy(), c_prev=z.copy(), t=1.0,
                    objective=objective(p, z, z))


def _prox_grad(p, x, c, step):
    r = p.synthesize(x, c) - p.embed(p.d)
    gx, gc = p.adjoint(r)
    return grid.shrink_nonneg(x - step * gx, step * p.lam), c - step * gc


def ista_step(p, s, step):
    """One proximal-gradient step from ``(s.x, s.c)``."""
    if not step > 0:
        raise InvalidArgumentError(f"step must be positive, got {step}")
    _check_shapes(p, s.x, s.c)
    x, c = _prox_grad(p, s.x, s.c, step)
    f = objective(p, x, c)
    return replace(s, x=x, c=c, x_prev=s.x, c_prev=s.c, iteration=s.iteration + 1,
                   objective=f, history=s.history + [f])


def ista_solve(p, iters, step=None):
    """Plain ISTA for ``iters`` steps from zero; step defaults to ``1/L``."""
    step = 1.0 / p.lipschitz() if step is None else step
    s = initial_state(p)
    history = [s.objective]
    for _ in range(iters):
        s = ista_step(p, replace(s, history=[]), step)
        history.append(s.objective)
    s.history = history
    return s


def fista_solve(p, iters=400, tol=1e-8, step=None):
    """Accelerated proximal gradient with monotone restart.

    Whenever an extrapolated step would raise the objective it is discarded,
    the momentum resets (``t = 1``) and a plain step is taken instead. Stops
    after ``iters`` iterations or once the relative objective change
    ``|F_k - F_{k-1}| / max(1, F_{k-1})`` drops below ``tol``.
    """
    if iters < 1:
        raise InvalidArgumentError(f"iters must be >= 1, got {iters}")
    step = 1.0 / p.lipschitz() if step is None else step
    s = initial_state(p)
    x, c, x_prev, c_prev, t = s.x, s.c, s.x_prev, s.c_prev, 1.0
    f = s.objective
    history = [f]
    k = 0
    while k < iters:
        k += 1
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        yx = x + beta * (x - x_prev)
        yc = c + beta * (c - c_prev)
        xn, cn = _prox_grad(p, yx, yc, step)
        fn = objective(p, xn, cn)
        if fn > f:
            t_next = 1.0
            xn, cn = _prox_grad(p, x, c, step)
            fn = objective(p, xn, cn)
        x_prev, c_prev, x, c, t = x, c, xn, cn, t_next
        history.append(fn)
        converged = abs(fn - f) / max(1.0, f) < tol
        f = fn
        if converged:
            break
    return CscState(x=x, c=c, x_prev=x_prev, c_prev=c_prev, t=t, iteration=k,
                    objective=f, history=history)

"""Unrolled proximal-gradient network for spot maps.

Layer ``k`` computes::

    x_{k+1} = shrink_nonneg(C_k * d + S_k * x_k, theta_k),   x_0 = 0

with zero-padded convolutions. :func:`init_from_psf` sets the weights so the
network reproduces ``K`` ISTA iterations of the background-free sparse
coding problem; training then adjusts every filter and threshold.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import grid
from .csc import CscProblem
from .errors import InvalidArgumentError

ARCH = "spotnet"


@dataclass
class SpotNetModel:
    C: np.ndarray       # (K, ks, ks) input-injection filters
    S: np.ndarray       # (K, ks, ks) state-update filters
    theta: np.ndarray   # (K,) thresholds
    tied: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.C = np.array(self.C, dtype=np.float64)
        self.S = np.array(self.S, dtype=np.float64)
        self.theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        K = len(self.theta)
        if K < 1:
            raise InvalidArgumentError("SpotNet needs at least one layer")
        if self.C.shape != self.S.shape or self.C.ndim != 3 or self.C.shape[0] != K:
            raise InvalidArgumentError(
                f"filter stacks {self.C.shape}, {self.S.shape} do not match {K} layers")
        ks = self.C.shape[1:]
        if ks[0] % 2 == 0 or ks[1] % 2 == 0:
            raise InvalidArgumentError(f"kernel size must be odd, got {ks}")
        if np.any(self.theta < 0):
            raise InvalidArgumentError("thresholds must be non-negative")

    arch = ARCH

    @property
    def layers(self):
        return len(self.theta)

    @property
    def kernel_size(self):
        return self.C.shape[1]

    def param_count(self):
        n = self.C[0].size + self.S[0].size + 1
        return n if self.tied else n * self.layers

    def parameters(self):
        """Trainable arrays keyed by name (one set when weights are tied)."""
        if self.tied:
            return {"C": self.C[0].copy(), "S": self.S[0].copy(), "theta": self.theta[:1].copy()}
        out = {}
        for k in range(self.layers):
            out[f"C{k}"] = self.C[k].copy()
            out[f"S{k}"] = self.S[k].copy()
            out[f"theta{k}"] = self.theta[k:k + 1].copy()
        return out

    def with_parameters(self, params):
        K = self.layers
        if self.tied:
            C = np.repeat(params["C"][None], K, axis=0)
            S = np.repeat(params["S"][None], K, axis=0)
            theta = np.repeat(params["theta"], K)
        else:
            C = np.stack([params[f"C{k}"] for k in range(K)])
            S = np.stack([params[f"S{k}"] for k in range(K)])
            theta = np.concatenate([params[f"theta{k}"] for k in range(K)])
        return replace(self, C=C, S=S, theta=np.maximum(theta, 0.0), meta=dict(self.meta))

    def clamp(self, params):
        """Project thresholds onto ``theta >= 0`` in place."""
        for name, value in params.items():
            if name.startswith("theta"):
                np.maximum(value, 0.0, out=value)

    def _layer_names(self, k):
        if self.tied:
            return "C", "S", "theta"
        return f"C{k}", f"S{k}", f"theta{k}"

    def build(self, tape, leaves, d):
        """Record the forward pass of batch ``d`` on ``tape`` using ``leaves``."""
        d = tape.constant(d) if not hasattr(d, "tape") else d
        x = tape.constant(np.zeros(d.shape))
        for k in range(self.layers):
            c_name, s_name, t_name = self._layer_names(k)
            u = tape.add(tape.conv_same(d, leaves[c_name]), tape.conv_same(x, leaves[s_name]))
            x = tape.shrink_nonneg(u, leaves[t_name])
        return x


def init_from_psf(psf, lam, K, kernel_size, tied=False, step=None):
    """Weights that make the network equal ``K`` ISTA steps from ``x = 0``.

    With ``alpha = 1/L``: ``C_k = alpha * flip(a)``,
    ``S_k = delta - alpha * (a conv flip(a))`` and ``theta_k = alpha * lam``.
    The equality is exact when ``kernel_size >= 2 * psf_size - 1``; smaller
    kernels hold a centred crop of the autocorrelation.
    """
    psf = grid.as_kernel(psf, role="psf", name="psf")
    kernel_size = int(kernel_size)
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise InvalidArgumentError(f"kernel_size must be odd and positive, got {kernel_size}")
    if K < 1:
        raise InvalidArgumentError(f"K must be >= 1, got {K}")
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    if step is None:
        step = 1.0 / CscProblem(np.zeros((8, 8)), psf, lam).lipschitz()
    shape = (kernel_size, kernel_size)
    autocorr = grid.correlate_valid(np.pad(psf, [(s - 1, s - 1) for s in psf.shape]), psf)
    delta = np.zeros(shape)
    delta[kernel_size // 2, kernel_size // 2] = 1.0
    C = step * grid.embed_center(grid.flip(psf), shape)
    S = delta - step * grid.embed_center(autocorr, shape)
    meta = {"step": float(step), "lam": float(lam)}
    return SpotNetModel(C=np.repeat(C[None], K, axis=0), S=np.repeat(S[None], K, axis=0),
                        theta=np.full(K, step * lam), tied=tied, meta=meta)


def forward(m, d, tape=None, leaves=None, return_all=False):
    """Run the network on one image or a stack ``(N, H, W)``.

    Without a tape this is plain numpy. With a tape the pass is recorded and
    the output node returned; pass ``leaves`` (name -> leaf node, as from
    ``{k: tape.leaf(v) for k, v in m.parameters().items()}``) to make the
    weights differentiable, otherwise they enter as constants.
    """
    if tape is not None:
        if leaves is None:
            leaves = {k: tape.constant(v) for k, v in m.parameters().items()}
        return m.build(tape, leaves, np.asarray(d, dtype=np.float64))
    d = grid.as_grid(d)
    x = np.zeros(d.shape)
    iterates = []
    for k in range(m.layers):
        u = grid.conv_same(d, m.C[k]) + grid.conv_same(x, m.S[k])
        x = grid.shrink_nonneg(u, m.theta[k])
        iterates.append(x)
    return iterates if return_all else x

from .training import train  # noqa: E402,F401

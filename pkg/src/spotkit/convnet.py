"""Feed-forward CNN baseline.

``L`` zero-padded convolutional layers with ReLU after every layer,
``1 -> W -> ... -> W -> 1`` channels, output the same size as the input.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import grid
from .errors import InvalidArgumentError

ARCH = "convnet"


@dataclass
class ConvNetModel:
    weights: list   # per layer (C_out, C_in, k, k)
    biases: list    # per layer (C_out,)
    meta: dict = field(default_factory=dict)

    arch = ARCH

    def __post_init__(self):
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise InvalidArgumentError("need one bias vector per weight tensor")
        c_in = 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 4 or w.shape[1] != c_in or b.shape != (w.shape[0],):
                raise InvalidArgumentError(f"layer {i}: bad shapes {w.shape}, {b.shape}")
            if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
                raise InvalidArgumentError(f"layer {i}: kernel must be odd, got {w.shape[2:]}")
            c_in = w.shape[0]
        if c_in != 1:
            raise InvalidArgumentError("last layer must have a single output channel")

    @property
    def layers(self):
        return len(self.weights)

    def param_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w.copy()
            out[f"b{i}"] = b.copy()
        return out

    def with_parameters(self, params):
        n = self.layers
        return replace(self, weights=[params[f"w{i}"] for i in range(n)],
                       biases=[params[f"b{i}"] for i in range(n)], meta=dict(self.meta))

    def clamp(self, params):
        pass

    def build(self, tape, leaves, d):
        h = tape.constant(np.asarray(d, dtype=np.float64)[:, None])
        for i in range(self.layers):
            h = tape.relu(tape.add_bias(tape.conv_channels(h, leaves[f"w{i}"]), leaves[f"b{i}"]))
        return h


def init_convnet(layers=3, width=8, kernel_size=7, seed=0):
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` weights, zero biases."""
    if layers < 1 or width < 1:
        raise InvalidArgumentError("layers and width must be >= 1")
    if kernel_size % 2 == 0:
        raise InvalidArgumentError(f"kernel_size must be odd, got {kernel_size}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    c_in = 1
    for i in range(layers):
        c_out = 1 if i == layers - 1 else width
        bound = 1.0 / math.sqrt(c_in * kernel_size * kernel_size)
        weights.append(rng.uniform(-bound, bound, size=(c_out, c_in, kernel_size, kernel_size)))
        biases.append(np.zeros(c_out))
        c_in = c_out
    return ConvNetModel(weights, biases, meta={"seed": seed})


def cn_forward(m, d, tape=None, leaves=None):
    """Run the CNN on one image or a stack ``(N, H, W)``.

    With a tape the pass is recorded and the ``(N, 1, H, W)`` output node is
    returned; see :func:`spotkit.spotnet.forward` for ``leaves``.
    """
    d = np.asarray(d, dtype=np.float64)
    if tape is not None:
        if leaves is None:
            leaves = {k: tape.constant(v) for k, v in m.parameters().items()}
        return m.build(tape, leaves, d)
    single = d.ndim == 2
    h = (d[None] if single else d)[:, None]
    for w, b in zip(m.weights, m.biases):
        kh, kw = w.shape[-2:]
        xpad = grid.pad_same(h, (kh, kw), "zero")[:, None]
        h = grid.correlate_valid(xpad, w[None, ..., ::-1, ::-1]).sum(axis=2)
        h = np.maximum(h + b[None, :, None, None], 0.0)
    out = h[:, 0]
    return out[0] if single else out

from .training import train as cn_train  # noqa: E402

"""A small define-by-run reverse-mode tape over the grid operations.

Forward values are computed eagerly when an operation is recorded; calling
:meth:`Tape.backward` walks the recorded entries once in reverse order.

    tape = Tape()
    k = tape.leaf(kernel)
    d = tape.constant(image)
    loss = tape.mse_loss(tape.shrink_nonneg(tape.conv_same(d, k), 0.1), target)
    grads = tape.backward(loss)      # {k.id: dloss/dk}

``shrink_nonneg`` and ``relu`` pass gradient only where their output is
strictly positive; at the kink the subgradient is 0.
"""

from dataclasses import dataclass, field

import numpy as np

from . import grid
from .errors import InvalidArgumentError


class Node:
    """A value on a tape, with its gradient accumulator."""

    __slots__ = ("id", "value", "grad", "requires_grad", "tape")

    def __init__(self, tape, node_id, value, requires_grad):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class Entry:
    op: str
    inputs: tuple
    output: Node
    saved: dict = field(default_factory=dict)


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# Each backward rule receives (entry, upstream gradient) and returns one
# gradient per input (None where the input needs none).

def _bw_add(e, g):
    a, b = e.inputs
    return _sum_to(g, a.shape), _sum_to(g, b.shape)


def _bw_sub(e, g):
    a, b = e.inputs
    return _sum_to(g, a.shape), -_sum_to(g, b.shape)


def _bw_scale(e, g):
    return (e.saved["c"] * g,)


def _bw_correlate(e, g):
    x, k = e.inputs
    boundary = e.saved["boundary"]
    kern = k.value
    gx = gk = None
    if x.requires_grad:
        gx = grid.conv_same(g, kern, boundary)
    if k.requires_grad:
        gk = grid.kernel_gradient(grid.pad_same(x.value, kern.shape, boundary), g)
    return gx, gk


def _bw_conv(e, g):
    x, k = e.inputs
    boundary = e.saved["boundary"]
    kern = k.value
    gx = gk = None
    if x.requires_grad:
        gx = grid.correlate_same(g, kern, boundary)
    if k.requires_grad:
        # conv(x, k) = correlate(x, flip(k)); chain through the flip
        gk = grid.flip(grid.kernel_gradient(grid.pad_same(x.value, kern.shape, boundary), g))
    return gx, gk


def _bw_conv_channels(e, g):
    x, w = e.inputs
    wv = w.value
    kh, kw = wv.shape[-2:]
    gx = gw = None
    if x.requires_grad:
        # adjoint of out[n,o] = sum_c conv(x[n,c], w[o,c])
        gpad = grid.pad_same(g, (kh, kw), "zero")[:, :, None]
        gx = grid.correlate_valid(gpad, wv[None]).sum(axis=1)
    if w.requires_grad:
        xpad = grid.pad_same(x.value, (kh, kw), "zero")
        gw = grid.correlate_valid(xpad[:, None], g[:, :, None]).sum(axis=0)
        gw = np.ascontiguousarray(gw[..., ::-1, ::-1])
    return gx, gw


def _bw_add_bias(e, g):
    x, b = e.inputs
    return g, g.sum(axis=tuple(i for i in range(g.ndim) if i != 1))


def _bw_shrink(e, g):
    v, theta = e.inputs
    active = e.saved["active"]
    gv = np.where(active, g, 0.0)
    gt = None
    if theta is not None and theta.requires_grad:
        gt = np.full(theta.shape, -gv.sum())
    return gv, gt


def _bw_relu(e, g):
    return (np.where(e.saved["active"], g, 0.0),)


def _bw_mse(e, g):
    a, b = e.inputs
    diff = a.value - b.value
    ga = (2.0 / diff.size) * g * diff
    return ga, -ga


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "scale": _bw_scale,
    "conv_same": _bw_conv,
    "correlate_same": _bw_correlate,
    "conv_channels": _bw_conv_channels,
    "add_bias": _bw_add_bias,
    "shrink_nonneg": _bw_shrink,
    "relu": _bw_relu,
    "mse_loss": _bw_mse,
}

KINK_OPS = ("shrink_nonneg", "relu")


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.entries = []
        self.nodes = []

    # -- node creation -----------------------------------------------------

    def _new(self, value, requires_grad):
        node = Node(self, len(self.nodes), value, requires_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad=True):
        """Register a parameter (or input) array as a leaf node."""
        return self._new(np.array(value, dtype=np.float64), requires_grad)

    def constant(self, value):
        return self.leaf(value, requires_grad=False)

    def _node(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise InvalidArgumentError(f"node {x.id} belongs to a different tape")
            return x
        return self.constant(x)

    # -- recording ---------------------------------------------------------

    def record(self, op, *inputs, **params):
        """Apply primitive ``op`` to ``inputs`` and append the entry."""
        method = getattr(self, op, None)
        if op not in _BACKWARD or method is None:
            raise InvalidArgumentError(f"unknown operation {op!r}")
        return method(*inputs, **params)

    def _push(self, op, inputs, value, **saved):
        value = np.asarray(value, dtype=np.float64)
        requires = any(n is not None and n.requires_grad for n in inputs)
        out = self._new(value, requires)
        self.entries.append(Entry(op, tuple(inputs), out, saved))
        return out

    @staticmethod
    def _same_shape(op, a, b):
        if a.shape != b.shape:
            raise InvalidArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")

    def add(self, a, b):
        a, b = self._node(a), self._node(b)
        self._same_shape("add", a, b)
        return self._push("add", (a, b), a.value + b.value)

    def sub(self, a, b):
        a, b = self._node(a), self._node(b)
        self._same_shape("sub", a, b)
        return self._push("sub", (a, b), a.value - b.value)

    def scale(self, a, c):
        a = self._node(a)
        c = float(c)
        return self._push("scale", (a,), c * a.value, c=c)

    def conv_same(self, x, k, boundary="zero"):
        x, k = self._node(x), self._node(k)
        return self._push("conv_same", (x, k), grid.conv_same(x.value, k.value, boundary),
                          boundary=boundary)

    def correlate_same(self, x, k, boundary="zero"):
        x, k = self._node(x), self._node(k)
        return self._push("correlate_same", (x, k),
                          grid.correlate_same(x.value, k.value, boundary), boundary=boundary)

    def conv_channels(self, x, w):
        """Multi-channel zero-padded convolution.

        ``x`` has shape ``(N, C_in, H, W)``, ``w`` has ``(C_out, C_in, kh, kw)``;
        the result is ``(N, C_out, H, W)``.
        """
        x, w = self._node(x), self._node(w)
        if x.value.ndim != 4 or w.value.ndim != 4 or x.shape[1] != w.shape[1]:
            raise InvalidArgumentError(
                f"conv_channels: incompatible shapes {x.shape} and {w.shape}")
        kh, kw = w.shape[-2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise InvalidArgumentError(f"conv_channels: kernel must be odd, got {(kh, kw)}")
        xpad = grid.pad_same(x.value, (kh, kw), "zero")[:, None]
        out = grid.correlate_valid(xpad, w.value[None, ..., ::-1, ::-1]).sum(axis=2)
        return self._push("conv_channels", (x, w), out)

    def add_bias(self, x, b):
        """Add a per-channel bias to ``(N, C, H, W)``."""
        x, b = self._node(x), self._node(b)
        if x.value.ndim != 4 or b.shape != (x.shape[1],):
            raise InvalidArgumentError(f"add_bias: shapes {x.shape} and {b.shape}")
        return self._push("add_bias", (x, b), x.value + b.value[None, :, None, None])

    def shrink_nonneg(self, v, theta):
        v = self._node(v)
        if isinstance(theta, Node):
            theta = self._node(theta)
            if theta.value.size != 1:
                raise InvalidArgumentError("shrink_nonneg: theta must be scalar")
            t = float(theta.value.reshape(()))
        else:
            t, theta = float(theta), None
        out = grid.shrink_nonneg(v.value, t)
        return self._push("shrink_nonneg", (v, theta), out, active=out > 0)

    def relu(self, v):
        v = self._node(v)
        out = np.maximum(v.value, 0.0)
        return self._push("relu", (v,), out, active=out > 0)

    def mse_loss(self, a, b):
        a, b = self._node(a), self._node(b)
        self._same_shape("mse_loss", a, b)
        return self._push("mse_loss", (a, b), np.mean((a.value - b.value) ** 2))

    # -- differentiation ---------------------------------------------------

    def backward(self, loss):
        """Return ``{leaf id: d loss / d leaf}`` for every requires-grad leaf.

        Gradients are also left on each node's ``grad`` attribute.
        """
        loss = self._node(loss)
        if loss.value.size != 1:
            raise InvalidArgumentError(f"loss must be scalar, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = np.zeros_like(node.value) if node.requires_grad else None
        if not loss.requires_grad:
            return self._leaf_grads()
        loss.grad = np.ones_like(loss.value)
        for entry in reversed(self.entries):
            out = entry.output
            if not out.requires_grad or entry.output.id > loss.id:
                continue
            grads = _BACKWARD[entry.op](entry, out.grad)
            for node, g in zip(entry.inputs, grads):
                if node is not None and node.requires_grad and g is not None:
                    node.grad = node.grad + g
        return self._leaf_grads()

    def _leaf_grads(self):
        produced = {e.output.id for e in self.entries}
        return {n.id: n.grad for n in self.nodes if n.requires_grad and n.id not in produced}

    def kink_signature(self):
        """Activity masks of every shrink/relu entry, used by gradient checks."""
        return [e.saved["active"] for e in self.entries if e.op in KINK_OPS]


def gradient_check(build, params, eps=1e-6, max_coords=None, seed=0):
    """Compare reverse-mode gradients with central differences.

    ``build(tape, leaves)`` must return a scalar loss node, where ``leaves``
    maps each key of ``params`` to a leaf node. Returns the largest
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`` over the
    checked coordinates. Coordinates whose perturbation flips any
    shrink/relu activity pattern straddle a kink and are skipped.
    ``max_coords`` limits the check to a seeded random sample per parameter.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise InvalidArgumentError(f"eps must be in [1e-8, 1e-4], got {eps}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    loss = build(tape, leaves)
    tape.backward(loss)
    analytic = {k: leaves[k].grad for k in params}
    base_sig = tape.kink_signature()

    def evaluate(name, idx, delta):
        trial = dict(params)
        arr = params[name].copy()
        arr[idx] += delta
        trial[name] = arr
        t = Tape()
        value = float(build(t, {k: t.leaf(v) for k, v in trial.items()}).value)
        sig = t.kink_signature()
        same = len(sig) == len(base_sig) and all(np.array_equal(a, b) for a, b in zip(sig, base_sig))
        return value, same

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in params.items():
        coords = list(np.ndindex(value.shape)) if value.ndim else [()]
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            plus, ok_p = evaluate(name, idx, eps)
            minus, ok_m = evaluate(name, idx, -eps)
            if not (ok_p and ok_m):
                continue
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(analytic[name][idx])
            err = abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric))
            worst = max(worst, err)
    return worst

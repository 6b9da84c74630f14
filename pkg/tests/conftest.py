"""Independent reference implementations used as test oracles.

Everything here is written with explicit loops or dense matrices and shares
no code with the package beyond numpy.
"""

import numpy as np
import pytest


def conv_direct(image, k, boundary="zero"):
    """Nested-loop flipped-kernel convolution."""
    h, w = image.shape
    kh, kw = k.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for u in range(kh):
                for v in range(kw):
                    r, c = i - (u - ch), j - (v - cw)
                    if boundary == "periodic":
                        acc += k[u, v] * image[r % h, c % w]
                    elif 0 <= r < h and 0 <= c < w:
                        acc += k[u, v] * image[r, c]
            out[i, j] = acc
    return out


def conv_matrix(shape, k, boundary="zero"):
    """Dense matrix M with ``M @ x.ravel() == conv_direct(x, k).ravel()``."""
    n = shape[0] * shape[1]
    cols = []
    for idx in range(n):
        e = np.zeros(n)
        e[idx] = 1.0
        cols.append(conv_direct(e.reshape(shape), k, boundary).ravel())
    return np.stack(cols, axis=1)


def shrink_bruteforce(v, theta, step=1e-4, upper=None):
    """argmin over a grid of u >= 0 of 0.5 (u - v)^2 + theta u."""
    upper = max(2.0, abs(v) + 1.0) if upper is None else upper
    u = np.arange(0.0, upper + step / 2, step)
    return float(u[np.argmin(0.5 * (u - v) ** 2 + theta * u)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def optimal_match_count(dets, truths, radius):
    """Largest number of one-to-one pairs within ``radius``, by exhaustive search."""
    dets = [tuple(d[:2]) for d in dets]
    truths = [tuple(t[:2]) for t in truths]

    def best(i, used):
        if i == len(dets):
            return 0
        top = best(i + 1, used)  # leave detection i unmatched
        for j, t in enumerate(truths):
            if j not in used and np.hypot(dets[i][0] - t[0], dets[i][1] - t[1]) <= radius:
                top = max(top, 1 + best(i + 1, used | {j}))
        return top

    return best(0, frozenset())


def metrics_from_count(tp, n_det, n_truth):
    p = tp / n_det if n_det else 1.0
    r = tp / n_truth if n_truth else 1.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def separated_instance(rng, radius=3.0, box=24.0, max_n=5):
    """Truths at least ``2 * radius`` apart; detections jittered or uniform.

    In this regime every detection lies within ``radius`` of at most one
    truth, the setting produced by the scene generator (minimum separation
    6 px against a 3 px match radius).
    """
    n_t = int(rng.integers(0, max_n + 1))
    truths = []
    while len(truths) < n_t:
        p = rng.uniform(0, box, 2)
        if all(np.hypot(*(p - q)) >= 2 * radius for q in truths):
            truths.append(p)
    n_d = int(rng.integers(0, max_n + 1))
    dets = []
    for _ in range(n_d):
        if truths and rng.random() < 0.6:
            t = truths[rng.integers(len(truths))]
            dets.append(t + rng.normal(0, radius * 0.6, 2))
        else:
            dets.append(rng.uniform(0, box, 2))
    return np.array(dets).reshape(-1, 2), np.array(truths).reshape(-1, 2)

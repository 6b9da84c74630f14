"""Point detections from predicted maps, and scoring against ground truth.

Coordinates follow the image convention: ``x`` is the column, ``y`` the row,
pixel centres at integers.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    score: float


def _strict_local_maxima(m):
    padded = np.pad(m, 1, mode="constant", constant_values=-np.inf)
    h, w = m.shape
    is_max = np.ones(m.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                is_max &= m > padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
    return is_max


def _centroid(m, i, j):
    h, w = m.shape
    r0, r1 = max(0, i - 1), min(h, i + 2)
    c0, c1 = max(0, j - 1), min(w, j + 2)
    win = np.maximum(m[r0:r1, c0:c1], 0.0)
    total = win.sum()
    if total <= 0:
        return float(j), float(i)
    rows = np.arange(r0, r1)[:, None]
    cols = np.arange(c0, c1)[None, :]
    return float((win * cols).sum() / total), float((win * rows).sum() / total)


def extract_detections(score_map, threshold, nms_radius=2.0):
    """Strict 8-neighbour maxima above ``threshold``, thinned by greedy NMS.

    Candidates are visited by descending score (ties by row, then column);
    one is dropped if a kept candidate lies within ``nms_radius`` pixels.
    Survivors are refined to the intensity centroid of their 3x3 window.
    """
    if not threshold > 0:
        raise InvalidArgumentError(f"threshold must be positive, got {threshold}")
    if not nms_radius >= 1:
        raise InvalidArgumentError(f"nms_radius must be >= 1, got {nms_radius}")
    m = np.asarray(score_map, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidArgumentError(f"map must be 2-D, got {m.shape}")
    rows, cols = np.nonzero(_strict_local_maxima(m) & (m > threshold))
    scores = m[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    kept = []
    r2 = nms_radius * nms_radius
    for idx in order:
        i, j = rows[idx], cols[idx]
        if all((i - ki) ** 2 + (j - kj) ** 2 > r2 for ki, kj in kept):
            kept.append((i, j))
    dets = []
    for i, j in kept:
        x, y = _centroid(m, i, j)
        dets.append(Detection(x, y, float(m[i, j])))
    return dets


def _ratio(num, den):
    return num / den if den else 1.0


@dataclass
class MatchReport:
    pairs: list                 # (detection index, truth index, distance)
    unmatched_detections: list
    unmatched_truths: list
    n_detections: int
    n_truths: int
    tp: int = field(init=False)
    fp: int = field(init=False)
    fn: int = field(init=False)

    def __post_init__(self):
        self.tp = len(self.pairs)
        self.fp = self.n_detections - self.tp
        self.fn = self.n_truths - self.tp

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self):
        return f1_score(self.precision, self.recall)

    @property
    def count_error(self):
        return abs(self.n_detections - self.n_truths)


def f1_score(precision, recall):
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def _points(items):
    if len(items) and isinstance(items[0], Detection):
        return np.array([[d.x, d.y] for d in items], dtype=np.float64)
    arr = np.asarray(items, dtype=np.float64)
    return arr.reshape(len(arr), -1)[:, :2] if len(arr) else np.zeros((0, 2))


def match_and_score(detections, truths, radius=3.0):
    """Greedy one-to-one matching by ascending distance.

    ``detections`` is a list of :class:`Detection` or an ``(n, 2+)`` array of
    ``(x, y)``; ``truths`` an ``(m, 2+)`` array whose first two columns are
    ``(cx, cy)``. Pairs farther apart than ``radius`` never match. Equal
    distances are broken by detection index, then truth index.
    """
    if not radius > 0:
        raise InvalidArgumentError(f"radius must be positive, got {radius}")
    dp, tp = _points(detections), _points(truths)
    nd, nt = len(dp), len(tp)
    pairs = []
    if nd and nt:
        dist = np.sqrt(((dp[:, None, :] - tp[None, :, :]) ** 2).sum(axis=-1))
        di, ti = np.nonzero(dist <= radius)
        dd = dist[di, ti]
        used_d, used_t = set(), set()
        for k in np.lexsort((ti, di, dd)):
            i, j = int(di[k]), int(ti[k])
            if i not in used_d and j not in used_t:
                used_d.add(i)
                used_t.add(j)
                pairs.append((i, j, float(dd[k])))
    matched_d = {p[0] for p in pairs}
    matched_t = {p[1] for p in pairs}
    return MatchReport(
        pairs=pairs,
        unmatched_detections=[i for i in range(nd) if i not in matched_d],
        unmatched_truths=[j for j in range(nt) if j not in matched_t],
        n_detections=nd,
        n_truths=nt,
    )


@dataclass
class Totals:
    """Detection counts pooled over images."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    abs_count_error: int = 0
    images: int = 0

    def add(self, report):
        self.tp += report.tp
        self.fp += report.fp
        self.fn += report.fn
        self.abs_count_error += report.count_error
        self.images += 1

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self):
        return f1_score(self.precision, self.recall)

    @property
    def mean_count_error(self):
        return self.abs_count_error / self.images if self.images else 0.0


def parse_sweep(text):
    """``"LO:HI:STEPS"`` -> evenly spaced thresholds (inclusive)."""
    try:
        lo, hi, steps = text.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError:
        raise InvalidArgumentError(f"threshold sweep must be LO:HI:STEPS, got {text!r}") from None
    if steps < 1 or not 0 < lo <= hi:
        raise InvalidArgumentError(f"bad threshold sweep {text!r}")
    # rounding strips linspace noise such as 0.039999999999999994
    return [lo] if steps == 1 else [round(float(t), 12) for t in np.linspace(lo, hi, steps)]


def sweep(maps, truths, thresholds, match_radius=3.0, nms_radius=2.0):
    """Score every map at every threshold.

    Returns ``(per_image, totals)``: ``per_image[t][i]`` is the
    :class:`MatchReport` for image ``i`` at threshold ``t``; ``totals[t]``
    pools them in index order.
    """
    per_image, totals = [], []
    for t in thresholds:
        reports = [match_and_score(extract_detections(m, t, nms_radius), tr, match_radius)
                   for m, tr in zip(maps, truths)]
        agg = Totals()
        for r in reports:
            agg.add(r)
        per_image.append(reports)
        totals.append(agg)
    return per_image, totals


def best_threshold(thresholds, totals):
    """Index of the highest pooled F1 (lowest threshold index on ties)."""
    f1s = [t.f1 for t in totals]
    best = max(range(len(f1s)), key=lambda i: (f1s[i], -i))
    return best if not math.isnan(f1s[best]) else 0

"""Location-aware SELD metrics with distance error and jackknife intervals.

Scoring works on 1 s segments (10 label frames). Inside a segment, every
(class, track) pair of a list becomes one instance whose direction and
distance are taken from its medoid frame. Reference and predicted instances
of the same class are matched with the Hungarian algorithm on angular
distance. A match within 20 degrees is a true positive; a match beyond the
gate counts as one false positive and one false negative. Localization
errors and recall use every same-class match, gated or not.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .core import angular_distance

DOA_THRESHOLD = 20.0
FRAMES_PER_SEGMENT = 10


class GridMismatch(ValueError):
    pass


class EmptyReference(ValueError):
    pass


class TooFewClips(ValueError):
    pass


def hungarian(cost):
    """Minimum-cost one-to-one assignment for an n x m matrix.

    Returns ``min(n, m)`` sorted ``(row, col)`` pairs.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


@dataclass
class Instance:
    class_id: int
    vec: np.ndarray
    distance: float


@dataclass
class SegmentCounts:
    """Per (segment, class) detection counters plus matched localization pairs.

    ``cells`` maps ``(clip, segment, class)`` to a dict of counters (``tp``,
    ``fp``, ``fn``, ``ref``, ``pred``, ``loc_tp``, ``loc_fn``). ``pairs``
    holds ``(angular_error, distance_error)`` for every same-class match.
    """
    cells: dict = field(default_factory=dict)
    pairs: list = field(default_factory=list)

    def __add__(self, other):
        cells = dict(self.cells)
        for k, v in other.cells.items():
            if k in cells:
                cells[k] = {n: cells[k][n] + v[n] for n in v}
            else:
                cells[k] = dict(v)
        return SegmentCounts(cells, self.pairs + other.pairs)

    def segment_totals(self):
        seg = defaultdict(lambda: defaultdict(int))
        for (clip, s, _c), cnt in self.cells.items():
            for n, v in cnt.items():
                seg[clip, s][n] += v
        return seg


def _medoid(frames):
    """Instance from the medoid frame of ``[(frame, vec, dist)]`` (earliest on ties)."""
    frames = sorted(frames, key=lambda x: x[0])
    if len(frames) <= 2:
        _, vec, dist = frames[0]
        return vec, dist
    vecs = np.array([f[1] for f in frames])
    cos = np.clip(vecs @ vecs.T, -1.0, 1.0)
    total = np.degrees(np.arccos(cos)).sum(axis=1)
    k = int(np.argmin(total))
    return frames[k][1], frames[k][2]


def segment_instances(events, n_segments, frames_per_segment=FRAMES_PER_SEGMENT):
    """Reduce frame-level events to ``{(segment, class): [Instance]}``."""
    buckets = defaultdict(list)
    for ev in events:
        s = ev.frame // frames_per_segment
        if s >= n_segments:
            continue
        buckets[s, ev.class_id, ev.track_id].append((ev.frame, ev.unit(), ev.distance))
    out = defaultdict(list)
    for (s, c, _track), frames in sorted(buckets.items(), key=lambda kv: kv[0]):
        vec, dist = _medoid(frames)
        out[s, c].append(Instance(c, vec, dist))
    return out


def score_segments(refs, preds, clip_length, clip_id=0,
                   frames_per_segment=FRAMES_PER_SEGMENT, doa_threshold=DOA_THRESHOLD):
    """Count detections and localization matches for one clip.

    ``clip_length`` is in label frames; events past it raise ``GridMismatch``.
    """
    for ev in list(refs) + list(preds):
        if not 0 <= ev.frame < clip_length:
            raise GridMismatch(f"frame {ev.frame} outside clip of {clip_length} label frames")
    n_segments = math.ceil(clip_length / frames_per_segment)
    ref_inst = segment_instances(refs, n_segments, frames_per_segment)
    pred_inst = segment_instances(preds, n_segments, frames_per_segment)
    counts = SegmentCounts()
    for key in sorted(set(ref_inst) | set(pred_inst)):
        r, p = ref_inst.get(key, []), pred_inst.get(key, [])
        cell = dict(tp=0, fp=0, fn=0, ref=len(r), pred=len(p), loc_tp=0, loc_fn=0)
        matched = []
        if r and p:
            cost = np.array([[angular_distance(a.vec, b.vec) for b in p] for a in r])
            matched = hungarian(cost)
        for i, j in matched:
            ang = float(cost[i, j])
            counts.pairs.append((ang, abs(r[i].distance - p[j].distance)))
            if ang <= doa_threshold:
                cell["tp"] += 1
            else:
                cell["fp"] += 1
                cell["fn"] += 1
        cell["fp"] += len(p) - len(matched)
        cell["fn"] += len(r) - len(matched)
        cell["loc_tp"] = len(matched)
        cell["loc_fn"] = len(r) - len(matched)
        s, c = key
        counts.cells[clip_id, s, c] = cell
    return counts


@dataclass
class Scores:
    ER: float
    F1: float
    DOA_error: float
    recall: float
    dist_error: float
    ci: dict = field(default_factory=dict)

    FIELDS = ("ER", "F1", "DOA_error", "recall", "dist_error")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}


def compute_scores(counts: SegmentCounts) -> Scores:
    """Micro-averaged ER, F1 (%), DOA error (deg), localization recall (%), distance MAE (m).

    With no localization match at all the DOA error is 180 and the distance
    error is NaN.
    """
    n_ref = sum(c["ref"] for c in counts.cells.values())
    if n_ref == 0:
        raise EmptyReference("error rate undefined without reference events")
    S = D = I = 0
    for tot in counts.segment_totals().values():
        fp, fn = tot["fp"], tot["fn"]
        S += min(fp, fn)
        D += max(0, fn - fp)
        I += max(0, fp - fn)
    tp = sum(c["tp"] for c in counts.cells.values())
    fp = sum(c["fp"] for c in counts.cells.values())
    fn = sum(c["fn"] for c in counts.cells.values())
    loc_tp = sum(c["loc_tp"] for c in counts.cells.values())
    loc_fn = sum(c["loc_fn"] for c in counts.cells.values())
    er = (S + D + I) / n_ref
    f1 = 100.0 * 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 100.0
    recall = 100.0 * loc_tp / (loc_tp + loc_fn)
    if counts.pairs:
        arr = np.array(counts.pairs)
        doa, dist = float(arr[:, 0].mean()), float(arr[:, 1].mean())
    else:
        doa, dist = 180.0, float("nan")
    return Scores(er, f1, doa, recall, dist)


def t_quantile(p, dof):
    """Student t quantile; one degree of freedom uses the exact Cauchy form."""
    if dof == 1:
        return float(stats.cauchy.ppf(p))
    return float(stats.t.ppf(p, dof))


RANGES = {"ER": (0.0, math.inf), "F1": (0.0, 100.0), "DOA_error": (0.0, 180.0),
          "recall": (0.0, 100.0), "dist_error": (0.0, math.inf)}


def jackknife_ci(per_clip_inputs, metric_fn, significance=0.05, value_range=None):
    """Leave-one-clip-out jackknife: ``(estimate, low, high)``.

    ``metric_fn`` maps a list of per-clip inputs to a scalar. The estimate is
    bias-corrected; the interval uses Student's t with n - 1 degrees of
    freedom and is clipped to ``value_range`` when given.
    """
    items = list(per_clip_inputs)
    n = len(items)
    if n < 2:
        raise TooFewClips(f"jackknife needs at least 2 clips, got {n}")
    full = metric_fn(items)
    loo = np.array([metric_fn(items[:i] + items[i + 1:]) for i in range(n)], dtype=float)
    mean = loo.mean()
    est = n * full - (n - 1) * mean
    # shifted by the first value so identical clips give exactly zero spread
    dev = loo - loo[0]
    se = math.sqrt((n - 1) / n * float(((dev - dev.mean()) ** 2).sum()))
    half = t_quantile(1.0 - significance / 2.0, n - 1) * se
    lo, hi = est - half, est + half
    if value_range is not None:
        lo, hi = max(lo, value_range[0]), min(hi, value_range[1])
    return est, lo, hi


def _merge(counts_list):
    total = SegmentCounts()
    for c in counts_list:
        total = total + c
    return total


def evaluate(clip_counts, ci=True, significance=0.05) -> Scores:
    """Scores over a list of per-clip :class:`SegmentCounts`, with jackknife CIs.

    A leave-one-out subset without references scores NaN, which makes the
    affected intervals NaN rather than failing the whole report.
    """
    clip_counts = list(clip_counts)
    scores = compute_scores(_merge(clip_counts))
    if not ci or len(clip_counts) < 2:
        return scores
    cache = {}

    def subset_scores(idx):
        key = tuple(idx)
        if key not in cache:
            try:
                cache[key] = compute_scores(_merge([clip_counts[i] for i in idx]))
            except EmptyReference:
                cache[key] = None
        return cache[key]

    for name in Scores.FIELDS:
        def fn(idx, name=name):
            sc = subset_scores(idx)
            return math.nan if sc is None else getattr(sc, name)
        scores.ci[name] = jackknife_ci(list(range(len(clip_counts))), fn, significance, RANGES[name])
    return scores

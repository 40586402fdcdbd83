import itertools
import math

import numpy as np
import pytest

from seld3d.core import EventRecord
from seld3d.metrics import (
    EmptyReference, GridMismatch, Scores, TooFewClips, compute_scores, evaluate, hungarian,
    jackknife_ci, score_segments,
)


def brute_force_assignment(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return brute_force_assignment(cost.T)


def test_hungarian_examples():
    assert hungarian([[3.0]]) == [(0, 0)]
    assert hungarian(np.zeros((0, 3))) == []
    cost = np.array([[1.0, 2.0], [2.0, 4.0]])
    pairs = hungarian(cost)
    assert set(pairs) == {(0, 1), (1, 0)}
    assert sum(cost[i, j] for i, j in pairs) == 4


def test_hungarian_equals_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, m = rng.integers(1, 5, size=2)
        cost = rng.uniform(0, 180, (n, m))
        if rng.random() < 0.2:
            cost = np.round(cost / 45) * 45  # ties
        pairs = hungarian(cost)
        assert len(pairs) == min(n, m)
        assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})
        total = sum(cost[i, j] for i, j in pairs)
        assert total == pytest.approx(brute_force_assignment(cost), abs=1e-9)


def ev(frame, cls=0, track=0, az=0.0, el=0.0, dist=2.0):
    return EventRecord(frame, cls, track, az, el, dist)


def test_perfect_prediction():
    refs = [ev(f, az=-140.0 + 10.0 * f) for f in range(30)] + [ev(f, cls=4, az=-50.0) for f in range(12, 25)]
    s = compute_scores(score_segments(refs, refs, 50))
    assert (s.ER, s.F1, s.DOA_error, s.recall, s.dist_error) == (0, 100, 0, 100, 0)


def test_gate_case_25_degrees():
    counts = score_segments([ev(3)], [ev(3, az=25.0)], 50)
    cell = counts.cells[0, 0, 0]
    assert (cell["tp"], cell["fp"], cell["fn"]) == (0, 1, 1)
    s = compute_scores(counts)
    assert s.ER == 1 and s.F1 == 0
    assert s.DOA_error == pytest.approx(25)


def test_empty_predictions():
    refs = [ev(0), ev(15, cls=2), ev(33, cls=7, track=1)]
    counts = score_segments(refs, [], 50)
    assert sum(c["fn"] for c in counts.cells.values()) == 3
    s = compute_scores(counts)
    assert s.ER == 1 and s.F1 == 0 and s.recall == 0
    assert s.DOA_error == 180 and math.isnan(s.dist_error)


def test_distance_error_and_segment_reduction():
    refs = [ev(f, dist=2.0) for f in range(10)]
    preds = [ev(f, dist=2.5) for f in range(10)]
    s = compute_scores(score_segments(refs, preds, 50))
    assert s.dist_error == pytest.approx(0.5)
    assert s.ER == 0


def test_medoid_frame_represents_segment():
    # one outlier frame does not move the segment direction
    refs = [ev(f, az=0.0) for f in range(10)]
    preds = [ev(f, az=0.0) for f in range(9)] + [ev(9, az=90.0)]
    s = compute_scores(score_segments(refs, preds, 50))
    assert s.DOA_error == 0 and s.F1 == 100


def test_wrong_class_is_insertion_and_deletion():
    s = compute_scores(score_segments([ev(0, cls=1)], [ev(0, cls=2)], 50))
    assert s.F1 == 0 and s.ER == 1 and s.recall == 0


def test_grid_and_empty_reference_errors():
    with pytest.raises(GridMismatch):
        score_segments([ev(60)], [], 50)
    with pytest.raises(EmptyReference):
        compute_scores(score_segments([], [ev(1)], 50))


def _random_events(rng, n=20):
    out = {}
    for _ in range(n):
        e = ev(int(rng.integers(0, 50)), int(rng.integers(0, 13)), int(rng.integers(0, 3)),
               float(rng.uniform(-180, 180)), float(rng.uniform(-60, 60)), float(rng.uniform(0.5, 5)))
        out[e.key] = e
    return list(out.values())


def test_scores_order_invariant_and_monotone():
    rng = np.random.default_rng(1)
    for _ in range(30):
        refs, preds = _random_events(rng), _random_events(rng)
        s1 = compute_scores(score_segments(refs, preds, 50))
        s2 = compute_scores(score_segments(refs[::-1], list(reversed(preds)), 50))
        assert s1.as_dict() == s2.as_dict()
        assert 0 <= s1.F1 <= 100 and s1.ER >= 0 and 0 <= s1.DOA_error <= 180
        # add a perfect prediction for a reference that has no same-class prediction
        pred_keys = {(e.frame // 10, e.class_id) for e in preds}
        missing = [r for r in refs if (r.frame // 10, r.class_id) not in pred_keys]
        if missing:
            r = missing[0]
            better = preds + [EventRecord(r.frame, r.class_id, 2 if any(
                p.key == (r.frame, r.class_id, 2) for p in preds) else r.track_id,
                r.azimuth, r.elevation, r.distance)]
            if len({e.key for e in better}) == len(better):
                s3 = compute_scores(score_segments(refs, better, 50))
                assert s3.F1 >= s1.F1 - 1e-9
                assert s3.recall >= s1.recall - 1e-9
                assert s3.ER <= s1.ER + 1e-9


def test_jackknife_identical_clips_zero_width():
    est, lo, hi = jackknife_ci([0.3] * 5, lambda xs: float(np.mean(xs)))
    assert est == pytest.approx(0.3) and hi - lo == pytest.approx(0, abs=1e-15)


def test_jackknife_two_clip_closed_form():
    est, lo, hi = jackknife_ci([0.0, 1.0], lambda xs: float(np.mean(xs)))
    # leave-one-out values 1 and 0: mean 0.5, SE^2 = 1/2 * (0.25 + 0.25)
    t1 = math.tan(math.pi * (0.975 - 0.5))  # Student t with 1 dof is Cauchy
    assert est == pytest.approx(0.5, abs=1e-12)
    assert lo == pytest.approx(0.5 - t1 * 0.5, abs=1e-12)
    assert hi == pytest.approx(0.5 + t1 * 0.5, abs=1e-12)


def test_jackknife_clamps_and_needs_two_clips():
    _, lo, hi = jackknife_ci([0.0, 1.0], lambda xs: float(np.mean(xs)), value_range=(0, 1))
    assert (lo, hi) == (0, 1)
    with pytest.raises(TooFewClips):
        jackknife_ci([1.0], np.mean)


def test_jackknife_brackets_full_estimate():
    rng = np.random.default_rng(2)
    clips = [(int(rng.integers(1, 20)), int(rng.integers(20, 40))) for _ in range(30)]

    def ratio(items):
        return sum(a for a, _ in items) / sum(b for _, b in items)
    for _ in range(20):
        rng.shuffle(clips)
        est, lo, hi = jackknife_ci(clips, ratio)
        assert lo <= ratio(clips) <= hi


def test_evaluate_reports_all_fields_with_ci():
    rng = np.random.default_rng(3)
    counts = [score_segments(r, p, 50, clip_id=i)
              for i, (r, p) in enumerate((_random_events(rng), _random_events(rng)) for _ in range(6))]
    s = evaluate(counts)
    assert set(s.ci) == set(Scores.FIELDS)
    for name, (est, lo, hi) in s.ci.items():
        assert lo <= hi
    assert evaluate(counts, ci=False).ci == {}

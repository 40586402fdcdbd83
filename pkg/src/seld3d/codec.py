"""Event lists <-> network output tensors.

Two output layouts are supported:

* multi-ACCDDOA: per track n, class c and label frame t a 4-vector
  ``[a*R, D]``; ``N = 3`` tracks, 13 classes, 156 values per frame.
* multi-task (MT): a classwise ACCDOA branch (39 values per frame) and a
  classwise distance branch (13 values per frame).

Raw multi-ACCDDOA arrays are indexed ``[n, c, t, k]`` with ``k`` running over
``(x, y, z, distance)``. Flattened per-frame rows use the track-major layout
``[n][x, y, z, d][c]``.
"""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .core import NUM_CLASSES, NUM_TRACKS, EventRecord, angular_distance, unit_to_sph

ACTIVITY_THRESHOLD = 0.5
MERGE_ANGLE = 15.0


class TrackOverflow(ValueError):
    pass


class ClasswiseCollision(ValueError):
    pass


@dataclass(frozen=True)
class OutputSpec:
    method: str
    Q: int
    Oq: tuple
    activations: tuple


MULTI_ACCDDOA = OutputSpec("multi-accddoa", 1, (156,), ("linear",))
MULTI_TASK = OutputSpec("mt", 2, (39, 13), ("tanh", "relu"))
OUTPUT_SPECS = {"multi-accddoa": MULTI_ACCDDOA, "mt": MULTI_TASK}


@dataclass
class AccddoaTensor:
    a: np.ndarray  # N x C x T
    R: np.ndarray  # 3 x N x C x T
    D: np.ndarray  # N x C x T

    @classmethod
    def zeros(cls, n_frames, n_tracks=NUM_TRACKS, n_classes=NUM_CLASSES):
        shape = (n_tracks, n_classes, n_frames)
        return cls(np.zeros(shape), np.zeros((3,) + shape), np.zeros(shape))

    @property
    def n_frames(self):
        return self.a.shape[-1]

    def raw(self) -> np.ndarray:
        """N x C x T x 4 array of ``[a*R, D]``."""
        aR = self.a[None] * self.R
        return np.concatenate([np.moveaxis(aR, 0, -1), self.D[..., None]], axis=-1)

    def frames(self) -> np.ndarray:
        return raw_to_frames(self.raw())


def raw_to_frames(raw) -> np.ndarray:
    """N x C x T x 4 -> T x (N*4*C)."""
    N, C, T, _ = raw.shape
    return np.transpose(raw, (2, 0, 3, 1)).reshape(T, N * 4 * C)


def frames_to_raw(frames, n_tracks=NUM_TRACKS, n_classes=NUM_CLASSES) -> np.ndarray:
    T = frames.shape[0]
    return np.transpose(frames.reshape(T, n_tracks, 4, n_classes), (1, 3, 0, 2))


@dataclass
class MtTensor:
    accdoa: np.ndarray  # 3 x C x T
    dist: np.ndarray  # C x T

    @classmethod
    def zeros(cls, n_frames, n_classes=NUM_CLASSES):
        return cls(np.zeros((3, n_classes, n_frames)), np.zeros((n_classes, n_frames)))

    def frames(self):
        """(T x 39, T x 13) rows, ACCDOA laid out as [x][c], [y][c], [z][c]."""
        T = self.dist.shape[-1]
        return np.transpose(self.accdoa, (2, 0, 1)).reshape(T, -1), self.dist.T.copy()

    @classmethod
    def from_frames(cls, accdoa_rows, dist_rows, n_classes=NUM_CLASSES):
        T = accdoa_rows.shape[0]
        return cls(np.transpose(accdoa_rows.reshape(T, 3, n_classes), (1, 2, 0)), dist_rows.T.copy())


def _group(events):
    groups = defaultdict(list)
    for ev in events:
        groups[ev.frame, ev.class_id].append(ev)
    return groups


def encode_multi_accddoa(events, n_frames, n_tracks=NUM_TRACKS) -> AccddoaTensor:
    out = AccddoaTensor.zeros(n_frames, n_tracks)
    for (f, c), evs in _group(events).items():
        if len(evs) > n_tracks:
            raise TrackOverflow(f"{len(evs)} events of class {c} at frame {f}")
        if f >= n_frames:
            continue
        for ev in evs:
            if ev.track_id >= n_tracks:
                raise TrackOverflow(f"track {ev.track_id} >= {n_tracks}")
            n = ev.track_id
            out.a[n, c, f] = 1.0
            out.R[:, n, c, f] = ev.unit()
            out.D[n, c, f] = ev.distance
    return out


def adpit_targets(events, n_tracks=NUM_TRACKS):
    """Pad one (class, frame) event set to ``n_tracks`` slots by cyclic duplication.

    Returns a list of length ``n_tracks``; empty slots (only when no event is
    active) are ``None``.
    """
    evs = sorted(events, key=lambda e: e.track_id)
    k = len(evs)
    if k > n_tracks:
        raise TrackOverflow(f"{k} simultaneous events for {n_tracks} tracks")
    if k == 0:
        return [None] * n_tracks
    return [evs[i % k] for i in range(n_tracks)]


def slot_vector(ev) -> np.ndarray:
    if ev is None:
        return np.zeros(4)
    return np.append(ev.unit(), ev.distance)


def adpit_target_array(events, n_frames, n_tracks=NUM_TRACKS, n_classes=NUM_CLASSES) -> np.ndarray:
    """N x C x T x 4 padded ADPIT targets for a whole clip."""
    out = np.zeros((n_tracks, n_classes, n_frames, 4))
    for (f, c), evs in _group(events).items():
        if f >= n_frames:
            continue
        for n, ev in enumerate(adpit_targets(evs, n_tracks)):
            out[n, c, f] = slot_vector(ev)
    return out


def track_permutations(n_tracks=NUM_TRACKS):
    return list(itertools.permutations(range(n_tracks)))


def _make_event(frame, cls, track, vec, dist):
    az, el = unit_to_sph(vec)
    return EventRecord(int(frame), int(cls), int(track), az, el, float(max(0.0, dist)) or 1e-3)


def decode_multi_accddoa(pred, threshold=ACTIVITY_THRESHOLD, merge_angle=MERGE_ANGLE):
    """Events from a raw N x C x T x 4 prediction.

    Active same-class tracks closer than ``merge_angle`` at one frame are
    averaged into a single event.
    """
    pred = np.asarray(pred, dtype=float)
    N, C, T, _ = pred.shape
    score = np.linalg.norm(pred[..., :3], axis=-1)
    events = []
    for c in range(C):
        for t in range(T):
            active = [n for n in range(N) if score[n, c, t] > threshold]
            clusters = []
            for n in active:
                vec = pred[n, c, t, :3] / score[n, c, t]
                for cl in clusters:
                    if angular_distance(cl[0][0], vec) < merge_angle:
                        cl.append((vec, max(0.0, pred[n, c, t, 3])))
                        break
                else:
                    clusters.append([(vec, max(0.0, pred[n, c, t, 3]))])
            for track, cl in enumerate(clusters):
                vec = np.mean([v for v, _ in cl], axis=0)
                dist = float(np.mean([d for _, d in cl]))
                events.append(_make_event(t, c, track, vec, dist))
    return sorted(events)


def encode_mt(events, n_frames) -> MtTensor:
    out = MtTensor.zeros(n_frames)
    for (f, c), evs in _group(events).items():
        if len(evs) > 1:
            raise ClasswiseCollision(f"{len(evs)} events of class {c} at frame {f}")
        if f >= n_frames:
            continue
        ev = evs[0]
        out.accdoa[:, c, f] = ev.unit()
        out.dist[c, f] = ev.distance
    return out


def decode_mt(accdoa, dist, threshold=ACTIVITY_THRESHOLD):
    accdoa = np.asarray(accdoa, dtype=float)
    dist = np.asarray(dist, dtype=float)
    score = np.linalg.norm(accdoa, axis=0)
    events = []
    for c, t in zip(*np.nonzero(score > threshold)):
        events.append(_make_event(t, c, 0, accdoa[:, c, t], dist[c, t]))
    return sorted(events)

"""FOA rotation augmentation on feature rows and targets.

Quarter-turn azimuth rotations, the left/right mirror and the elevation flip
map the FOA axes onto each other with sign changes. Log-mel power is sign
blind and intensity vectors rotate with the source, so the transform is
exact on features as well as on direction labels.
"""
from __future__ import annotations

import itertools

import numpy as np

# feature channel of each Cartesian axis: log-mel (W, Y, Z, X) then IV (x, y, z)
_MEL_CHANNEL = (3, 1, 2)
_IV_CHANNEL = (4, 5, 6)
FOA_CHANNELS = 7


def foa_rotations():
    """The 16 signed axis permutations as 3x3 matrices; the first is the identity."""
    out = []
    for k, mirror, flip in itertools.product(range(4), (False, True), (False, True)):
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k]
        m = np.array([[c, -s, 0], [s, c, 0], [0, 0, -1 if flip else 1]], dtype=float)
        if mirror:
            m = m @ np.diag([1.0, -1.0, 1.0])
        out.append(m)
    return out


def _axis_map(m):
    src = np.abs(m).argmax(axis=1)
    sign = m[np.arange(3), src]
    return src, sign


def rotate_rows(X, m, n_features):
    """Apply ``m`` to FOA context rows laid out as (frames, 7, F)."""
    X = np.asarray(X)
    B = X.shape[0]
    v = X.reshape(B, -1, FOA_CHANNELS, n_features)
    out = v.copy()
    src, sign = _axis_map(m)
    for i in range(3):
        out[:, :, _MEL_CHANNEL[i]] = v[:, :, _MEL_CHANNEL[src[i]]]
        out[:, :, _IV_CHANNEL[i]] = sign[i] * v[:, :, _IV_CHANNEL[src[i]]]
    return out.reshape(X.shape)


def rotate_targets(targets, m):
    """Rotate the xyz part of ADPIT slots ``(B, N, C, 4)`` or multi-task ``((B, 3, C), (B, C))``."""
    m = m.astype(np.float32)
    if isinstance(targets, tuple):
        acc, dist = targets
        return np.einsum("ij,bjc->bic", m, acc), dist
    out = targets.copy()
    out[..., :3] = targets[..., :3] @ m.T
    return out


def rotation_moments(X, n_features):
    """Column mean and std of ``X`` pooled over all 16 rotations."""
    mean = X.mean(axis=0, dtype=np.float64)
    sq = (X.astype(np.float64) ** 2).mean(axis=0)
    mats = foa_rotations()
    m1 = sum(rotate_rows(mean[None], m, n_features)[0] for m in mats) / len(mats)
    m2 = sum(rotate_rows(sq[None], np.abs(m), n_features)[0] for m in mats) / len(mats)
    return m1, np.sqrt(np.maximum(m2 - m1 ** 2, 0.0))

"""Regression losses with analytic gradients.

All losses return a :class:`LossResult` holding the scalar value and the
gradient with respect to the prediction. Relative losses (MSPE, MAPE) divide
the residual by the ground truth.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .codec import MtTensor, track_permutations


class ShapeMismatch(ValueError):
    pass


class ZeroTargetDenominator(ValueError):
    pass


class BadTrackCount(ValueError):
    pass


class LossKind(str, enum.Enum):
    MSE = "mse"
    MAE = "mae"
    MSPE = "mspe"
    MAPE = "mape"

    @property
    def relative(self):
        return self in (LossKind.MSPE, LossKind.MAPE)


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


def _check(pred, target):
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")


def pointwise(kind, pred, target):
    """Per-element loss and its derivative w.r.t. ``pred`` (no averaging)."""
    kind = LossKind(kind)
    r = pred - target
    if kind.relative:
        if np.any(target <= 0):
            raise ZeroTargetDenominator(f"{kind.value} needs strictly positive targets")
        r = r / target
        scale = 1.0 / target
    else:
        scale = 1.0
    if kind in (LossKind.MSE, LossKind.MSPE):
        return r * r, 2.0 * r * scale
    return np.abs(r), np.sign(r) * scale


def elementwise_loss(kind, pred, target) -> LossResult:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    _check(pred, target)
    val, d = pointwise(kind, pred, target)
    m = pred.size
    return LossResult(float(val.sum() / m), d / m)


def mt_loss(pred: MtTensor, target: MtTensor, dist_kind=LossKind.MSE):
    """Sum of the ACCDOA (MSE) and distance branch losses, averaged over classes x frames.

    With a relative distance loss only class-frames that carry a reference
    distance contribute to the distance term; the normalization stays C*T.
    Returns ``(LossResult value, MtTensor gradient)`` packed in a LossResult
    whose ``grad`` is an :class:`MtTensor`.
    """
    dist_kind = LossKind(dist_kind)
    _check(pred.accdoa, target.accdoa)
    _check(pred.dist, target.dist)
    n_cells = target.dist.size
    r = pred.accdoa - target.accdoa
    doa_val = float((r * r).sum() / (3 * n_cells))
    doa_grad = 2.0 * r / (3 * n_cells)

    if dist_kind.relative:
        mask = target.dist > 0
        dval = np.zeros_like(pred.dist)
        dgrad = np.zeros_like(pred.dist)
        v, g = pointwise(dist_kind, pred.dist[mask], target.dist[mask])
        dval[mask] = v
        dgrad[mask] = g
    else:
        dval, dgrad = pointwise(dist_kind, pred.dist, target.dist)
    dist_val = float(dval.sum() / n_cells)
    return LossResult(doa_val + dist_val, MtTensor(doa_grad, dgrad / n_cells))


def adpit_loss(pred, target, base_kind=LossKind.MSE, dist_weight: float = 1.0) -> LossResult:
    """Permutation-invariant multi-ACCDDOA loss.

    ``pred`` and ``target`` are N x C x T x 4 arrays; ``target`` holds the
    padded (duplicated) reference slots. For every (class, frame) the track
    permutation with the lowest mean slot loss is chosen (lowest permutation
    index on ties) and the minima are averaged over C*T. Each slot loss is
    the mean over the four components ``[x, y, z, d]``, the distance
    component weighted by ``dist_weight``.
    """
    base_kind = LossKind(base_kind)
    if base_kind.relative:
        raise ValueError("ADPIT supports only MSE and MAE base losses")
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    _check(pred, target)
    N, C, T, K = pred.shape
    if N != 3 or K != 4:
        raise BadTrackCount(f"expected 3 tracks x 4 components, got {N} x {K}")
    w = np.array([1.0, 1.0, 1.0, dist_weight])
    perms = track_permutations(N)
    per_perm = np.empty((len(perms), C, T))
    for i, perm in enumerate(perms):
        val, _ = pointwise(base_kind, pred, target[list(perm)])
        per_perm[i] = ((val * w).mean(axis=-1)).mean(axis=0)
    best = np.argmin(per_perm, axis=0)
    value = float(np.take_along_axis(per_perm, best[None], axis=0).sum() / (C * T))

    chosen = np.empty_like(target)
    for i, perm in enumerate(perms):
        sel = best == i
        if sel.any():
            chosen[:, sel] = target[list(perm)][:, sel]
    _, d = pointwise(base_kind, pred, chosen)
    grad = d * w / (K * N * C * T)
    return LossResult(value, grad)


def grad_check(loss_fn, point, step: float = 1e-5, atol: float = 1e-12) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(x)`` must return ``(value, grad)`` for a float64 array ``x``.
    """
    x = np.array(point, dtype=np.float64)
    _, g = loss_fn(x)
    g = np.asarray(g, dtype=np.float64)
    num = np.empty_like(x)
    flat, nflat = x.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp, _ = loss_fn(x)
        flat[i] = orig - step
        fm, _ = loss_fn(x)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), atol)
    return float(np.max(np.abs(g - num) / denom))

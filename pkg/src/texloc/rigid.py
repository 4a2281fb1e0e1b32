"""Least-squares rigid fits and RANSAC over 2D point correspondences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Pose2


def fit_rigid(src, dst) -> Pose2:
    """Rigid pose minimising ``sum |R src_i + t - dst_i|^2`` (no scale)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 2 or src.shape != dst.shape:
        raise ValueError("need at least two paired points")
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    sxy = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    sxx = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    th = math.atan2(sxy, sxx)
    c, s = math.cos(th), math.sin(th)
    return Pose2(th, md[0] - (c * ms[0] - s * ms[1]), md[1] - (s * ms[0] + c * ms[1]))


def residuals(pose: Pose2, src, dst) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    px = c * src[:, 0] - s * src[:, 1] + pose.tx
    py = s * src[:, 0] + c * src[:, 1] + pose.ty
    return np.hypot(px - dst[:, 0], py - dst[:, 1])


@dataclass
class RansacFit:
    pose: Pose2
    inliers: np.ndarray  # boolean mask over the correspondences
    hypotheses: int

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def _pair_hypotheses(src, dst, i, j):
    """Rigid poses from point pairs (i, j), one per row."""
    vs = src[j] - src[i]
    vd = dst[j] - dst[i]
    th = np.arctan2(vd[:, 1], vd[:, 0]) - np.arctan2(vs[:, 1], vs[:, 0])
    c, s = np.cos(th), np.sin(th)
    ms = 0.5 * (src[i] + src[j])
    md = 0.5 * (dst[i] + dst[j])
    tx = md[:, 0] - (c * ms[:, 0] - s * ms[:, 1])
    ty = md[:, 1] - (s * ms[:, 0] + c * ms[:, 1])
    ok = np.abs(np.hypot(vs[:, 0], vs[:, 1]) - np.hypot(vd[:, 0], vd[:, 1]))
    return c, s, tx, ty, ok


def ransac_rigid(src, dst, threshold: float = 3.0, max_iters: int = 1000, confidence: float = 0.99,
                 rng: np.random.Generator | None = None, batch: int = 64) -> RansacFit:
    """Two-point RANSAC for a rigid pose mapping ``src`` onto ``dst``.

    When every pair fits in the iteration budget the pairs are enumerated
    instead of sampled.  The returned pose is the least-squares fit over the
    returned inliers, re-estimated until the inlier set is stable.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 2:
        raise ValueError("RANSAC needs at least two correspondences")
    rng = rng if rng is not None else np.random.default_rng(0)

    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_iters:
        ii, jj = np.triu_indices(n, 1)
        exhaustive = True
    else:
        exhaustive = False

    best_count, best_cost, best_mask = -1, np.inf, None
    done = 0
    needed = n_pairs if exhaustive else max_iters
    while done < needed:
        m = min(batch, needed - done)
        if exhaustive:
            i, j = ii[done:done + m], jj[done:done + m]
        else:
            i = rng.integers(0, n, m)
            j = rng.integers(0, n - 1, m)
            j = j + (j >= i)
        done += m
        c, s, tx, ty, mismatch = _pair_hypotheses(src, dst, i, j)
        px = c[:, None] * src[None, :, 0] - s[:, None] * src[None, :, 1] + tx[:, None]
        py = s[:, None] * src[None, :, 0] + c[:, None] * src[None, :, 1] + ty[:, None]
        r = np.hypot(px - dst[None, :, 0], py - dst[None, :, 1])
        inl = r < threshold
        # Pairs whose lengths disagree cannot both be inliers of a rigid motion.
        inl[mismatch > 2.0 * threshold] = False
        count = inl.sum(axis=1)
        cost = np.where(inl, r, threshold).sum(axis=1)
        order = np.lexsort((cost, -count))
        k = order[0]
        if count[k] > best_count or (count[k] == best_count and cost[k] < best_cost):
            best_count, best_cost, best_mask = int(count[k]), float(cost[k]), inl[k].copy()
            if not exhaustive and best_count >= 2:
                w = best_count / n
                denom = math.log(max(1.0 - w * w, 1e-12))
                needed = min(max_iters, max(done, int(math.ceil(math.log(1.0 - confidence) / denom))))

    mask = best_mask
    if mask is None or mask.sum() < 2:
        pose = fit_rigid(src[:2], dst[:2])
        return RansacFit(pose, np.zeros(n, bool), done)
    pose = fit_rigid(src[mask], dst[mask])
    for _ in range(10):
        new = residuals(pose, src, dst) < threshold
        if new.sum() < 2 or np.array_equal(new, mask):
            break
        mask = new
        pose = fit_rigid(src[mask], dst[mask])
    return RansacFit(pose, mask, done)

"""Position-aware clone / split / prune control.

Scale thresholds grow with distance from the region centre: inside ``2r``
the factor is 1, beyond it grows linearly, so distant background Gaussians
may stay large without being split or pruned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..splat.gaussians import GaussianSet, concat, sigmoid

SPLIT_FACTOR = 1.6
CLONE_STEP = 0.1


def gamma(mu, c, r):
    """Scale factor for Gaussians at ``mu`` (vectorised over leading axes)."""
    if r <= 0:
        raise ValueError("scene radius must be positive")
    dist = np.linalg.norm(np.asarray(mu, dtype=np.float64) - np.asarray(c, dtype=np.float64), axis=-1)
    return np.where(dist < 2.0 * r, 1.0, dist / r - 1.0)


@dataclass
class DensifyStats:
    """Per-Gaussian gradient statistics accumulated between densify steps."""

    grad_sum: np.ndarray  # summed NDC mean-gradient magnitudes
    count: np.ndarray  # views in which the Gaussian was visible
    position_grad: np.ndarray  # summed world-space position gradients

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros((n, 3)))

    def add(self, grads):
        vis = grads.visible
        self.grad_sum[vis] += grads.mean2d_ndc[vis]
        self.count[vis] += 1
        self.position_grad += grads.means

    def mean_grad(self):
        return np.where(self.count > 0, self.grad_sum / np.maximum(self.count, 1), 0.0)


@dataclass
class DensifyResult:
    gaussians: GaussianSet
    kept: np.ndarray  # source rows carried over unchanged, in output order
    n_cloned: int
    n_split: int
    n_pruned: int


def _scale_limit(gs, cfg):
    gam = gamma(gs.means, gs.center, gs.radius) if cfg.use_ms else np.ones(len(gs))
    return gam * gs.radius


def densify_control(gs, stats, cfg, iteration, rng=None, prune_low_opacity=True):
    """Apply one round of densification.

    High-gradient Gaussians are cloned or split first.  The size limit is
    then applied to everything that remains, split children included, so a
    large initial Gaussian gets a chance to break up before it is judged.
    Which Gaussians split does not depend on ``b``, hence raising ``b`` can
    only keep more of them.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed + iteration)
    n = len(gs)
    max_scale = np.exp(gs.log_scales).max(axis=1) if n else np.zeros(0)
    limit = _scale_limit(gs, cfg)

    alive = np.ones(n, dtype=bool)
    if prune_low_opacity:
        alive &= sigmoid(gs.opacity_logits) >= cfg.prune_opacity
    hot = alive & (stats.mean_grad() > cfg.grad_threshold)
    clone = hot & (max_scale < cfg.g * limit)
    split = hot & ~clone

    kept = np.flatnonzero(alive & ~split & (max_scale <= cfg.b * limit))
    parts = [gs.subset(kept)]

    ci = np.flatnonzero(clone)
    if len(ci):
        c = gs.subset(ci)
        pg = stats.position_grad[ci]
        norm = np.linalg.norm(pg, axis=1, keepdims=True)
        direction = np.where(norm > 0, -pg / np.where(norm > 0, norm, 1.0), 0.0)
        c.means = c.means + CLONE_STEP * max_scale[ci, None] * direction
        parts.append(c)

    si = np.flatnonzero(split)
    dropped_children = 0
    if len(si):
        s = gs.subset(si)
        R = s.rotations()
        scales = np.exp(s.log_scales)
        for _ in range(2):
            ch = s.copy()
            z = rng.standard_normal((len(si), 3))
            ch.means = s.means + np.einsum("nij,nj->ni", R, scales * z)
            ch.log_scales = s.log_scales - np.log(SPLIT_FACTOR)
            ok = np.exp(ch.log_scales).max(axis=1) <= cfg.b * _scale_limit(ch, cfg)
            dropped_children += int(np.count_nonzero(~ok))
            parts.append(ch.subset(np.flatnonzero(ok)))

    out = concat(parts, gs.center, gs.radius)
    n_pruned = n - len(kept) - len(si) + dropped_children
    return DensifyResult(out, kept, len(ci), len(si), n_pruned)

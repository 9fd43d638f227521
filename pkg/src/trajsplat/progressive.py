"""Opacity-gated compositing of independently trained regions.

Each region is rendered on its own.  Regions are ranked by how closely their
render agrees with a coarse global reconstruction, and pixels then take
colour from the best-ranked regions until enough opacity has accumulated;
regions further down the list are ignored at that pixel.  This keeps a
region's floaters out of areas that another region already explains.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .optim.metrics import ssim
from .splat.gaussians import concat
from .splat.raster import OPACITY_EPS, FrameBuffers, rasterize

BLACK = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ProgressiveConfig:
    beta: float = 0.5
    lam: float = 0.2
    background: tuple = BLACK

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValidationError("beta must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lam must lie in [0, 1]")


@dataclass(frozen=True)
class RegionRank:
    ordering: tuple
    scores: tuple


def matching_score(local_render, global_render, lam):
    """Similarity ``(1 - lam)(1 - mean|diff|) + lam * SSIM``; larger = better match."""
    a = np.asarray(local_render, dtype=np.float64)
    b = np.asarray(global_render, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"render shapes differ: {a.shape} vs {b.shape}")
    l1 = float(np.mean(np.abs(a - b)))
    return (1.0 - lam) * (1.0 - l1) + lam * ssim(a, b)


def order_scores(scores):
    """Indices sorted by descending score, ties by ascending index."""
    return tuple(sorted(range(len(scores)), key=lambda i: (-scores[i], i)))


def rank_regions(locals_, global_set, view, cfg=ProgressiveConfig(), renders=None):
    """Score every local set against the global render from ``view``.

    ``renders`` may hold precomputed local :class:`FrameBuffers` (black
    background) so callers can reuse them for compositing.
    """
    if not locals_:
        raise ValidationError("need at least one local set")
    global_img = rasterize(global_set, view, BLACK).color
    if renders is None:
        renders = [rasterize(gs, view, BLACK) for gs in locals_]
    scores = tuple(matching_score(r.color, global_img, cfg.lam) for r in renders)
    return RegionRank(order_scores(scores), scores)


def progressive_weights(opacities, beta):
    """Per-pixel weights for opacities stacked in ranked order, shape (k, ...)."""
    o = np.asarray(opacities, dtype=np.float64)
    before = np.cumsum(o, axis=0) - o
    return np.where(before < beta, o, 0.0)


def composite(renders, beta, background=BLACK):
    """Blend ranked region buffers (rendered on black) into one image."""
    colors = np.stack([r.color for r in renders])
    opac = np.stack([r.accum_opacity for r in renders])
    w = progressive_weights(opac, beta)
    wsum = w.sum(axis=0)
    ok = wsum > OPACITY_EPS
    safe = np.where(ok, wsum, 1.0)
    color = np.einsum("kyx,kyxc->yxc", w, colors) / safe[..., None]
    # residual transparency of the blended regions shows the background
    coverage = np.sum(w * opac, axis=0) / safe
    bg = np.asarray(background, dtype=np.float64)
    out = color + (1.0 - coverage)[..., None] * bg
    return np.where(ok[..., None], out, bg)


def composite_buffers(renders, beta, background=BLACK):
    """Like :func:`composite` but also blends depth, normal and opacity."""
    color = composite(renders, beta, background)
    opac = np.stack([r.accum_opacity for r in renders])
    w = progressive_weights(opac, beta)
    wsum = w.sum(axis=0)
    ok = wsum > OPACITY_EPS
    safe = np.where(ok, wsum, 1.0)
    depth = np.where(ok, np.einsum("kyx,kyx->yx", w, np.stack([r.depth for r in renders])) / safe, 0.0)
    nsum = np.einsum("kyx,kyxc->yxc", w, np.stack([r.normal for r in renders]))
    norm = np.linalg.norm(nsum, axis=-1)
    has_n = ok & (norm > 1e-12)
    normal = np.where(has_n[..., None], nsum / np.where(has_n, norm, 1.0)[..., None], 0.0)
    coverage = np.where(ok, np.sum(w * opac, axis=0) / safe, 0.0)
    return FrameBuffers(color, depth, normal, coverage)


def progressive_render(locals_, view, cfg=ProgressiveConfig(), rank=None, global_set=None):
    """Render ``view`` from ranked local sets.

    Pass ``rank`` (from :func:`rank_regions`) or ``global_set`` to rank here;
    with neither, the list order is taken as the ranking.
    """
    if not locals_:
        raise ValidationError("need at least one local set")
    renders = [rasterize(gs, view, BLACK) for gs in locals_]
    if rank is None and global_set is not None:
        rank = rank_regions(locals_, global_set, view, cfg, renders)
    ordering = rank.ordering if rank is not None else tuple(range(len(locals_)))
    return composite([renders[i] for i in ordering], cfg.beta, cfg.background)


def naive_merge_render(locals_, view, background=BLACK):
    """Baseline: concatenate every region's Gaussians and render once."""
    if not locals_:
        raise ValidationError("need at least one local set")
    return rasterize(concat(locals_), view, background).color

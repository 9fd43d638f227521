"""Per-region and coarse global training loops."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ValidationError
from ..graph import build_graph, top_neighbors
from ..splat.gaussians import GaussianSet, logit
from ..splat.raster import GaussianGrads, backward, render
from .densify import DensifyStats, densify_control
from .metrics import photometric_and_grad
from .multiview import loss_mv

log = logging.getLogger(__name__)

PARAM_GROUPS = ("means", "quats", "log_scales", "opacity_logits", "colors")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    iterations: int = 2000
    densify: bool = True
    densify_interval: int = 100
    densify_from: int = 200
    densify_until: int = 1200
    grad_threshold: float = 2e-4
    g: float = 0.01
    b: float = 0.1
    prune_opacity: float = 0.005
    use_ms: bool = True
    use_mv: bool = True
    mv_weight: float = 1.0
    mv_neighbors: int = 4
    mv_patch: int = 7
    mv_from: int | None = None
    mv_pixel_samples: int = 1024
    mv_min_opacity: float = 0.5
    lr_position: float = 1.6e-4
    lr_position_decay: float = 0.01
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    init_opacity: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    holdout_every: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lam must lie in [0, 1]")
        if not 0.0 < self.g < self.b:
            raise ValidationError("need 0 < g < b")
        if self.iterations < 1:
            raise ValidationError("iterations must be positive")
        if self.densify and not self.densify_from < self.densify_until <= self.iterations:
            raise ValidationError("need densify_from < densify_until <= iterations")
        if self.densify_interval < 1:
            raise ValidationError("densify_interval must be positive")
        if self.mv_patch < 1 or self.mv_patch % 2 == 0:
            raise ValidationError("mv_patch must be a positive odd pixel count")
        if len(self.background) != 3:
            raise ValidationError("background needs three components")
        if self.holdout_every < 0:
            raise ValidationError("holdout_every must be >= 0")

    @property
    def mv_start(self):
        return self.mv_from if self.mv_from is not None else max(500, self.iterations // 8)

    def densify_due(self, it):
        return (
            self.densify
            and self.densify_from <= it <= self.densify_until
            and it > 0
            and it % self.densify_interval == 0
        )


class Adam:
    """Adam over the parameter arrays of a GaussianSet, one lr per group."""

    def __init__(self, gs, betas=(0.9, 0.999), eps=1e-15):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(getattr(gs, k)) for k in PARAM_GROUPS}
        self.v = {k: np.zeros_like(getattr(gs, k)) for k in PARAM_GROUPS}

    def step(self, gs, grads, lrs):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in PARAM_GROUPS:
            g = getattr(grads, k)
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = lrs[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)
            setattr(gs, k, getattr(gs, k) - upd)

    def remap(self, kept, n_new):
        """Keep moments of surviving rows, zero-initialise the appended ones."""
        for store in (self.m, self.v):
            for k in PARAM_GROUPS:
                old = store[k][kept]
                pad = np.zeros((n_new,) + old.shape[1:])
                store[k] = np.concatenate([old, pad])


@dataclass
class GradientBundle:
    grads: GaussianGrads
    loss: float
    photometric: float
    mv: float = 0.0
    mv_pairs: int = 0


def check_finite(grads):
    for name in PARAM_GROUPS:
        arr = getattr(grads, name)
        bad = ~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"non-finite gradient for Gaussian {i}, parameter {name}")


def compute_gradients(gs, view, target, cfg, neighbors=None, rng=None, backend=None):
    """Loss and analytic partials for one training view.

    ``neighbors`` (list of ``(CameraView, image)``) switches the multi-view
    term on; pass None or [] to train photometrically only.
    """
    buffers, state = render(gs, view, cfg.background, backend)
    loss_p, g_color = photometric_and_grad(buffers.color, target, cfg.lam)
    g_depth = g_normal = None
    mv_val, pairs = 0.0, 0
    if neighbors:
        res = loss_mv(
            buffers, view, target, neighbors,
            half_width=cfg.mv_patch // 2, samples=cfg.mv_pixel_samples, rng=rng,
            min_opacity=cfg.mv_min_opacity, backend=backend,
        )
        mv_val, pairs = res.loss, res.n_pairs
        if pairs:
            g_depth = cfg.mv_weight * res.g_depth
            g_normal = cfg.mv_weight * res.g_normal
    grads = backward(state, g_color, g_depth, g_normal)
    check_finite(grads)
    total = loss_p + cfg.mv_weight * mv_val
    return GradientBundle(grads, total, loss_p, mv_val, pairs)


# ---------------------------------------------------------------------------
# initialisation helpers


def scene_bounds(views):
    """Centre = mean camera position, radius = 1.1 x farthest camera from it."""
    centers = np.stack([v.center for v in views])
    c = centers.mean(axis=0)
    r = 1.1 * float(np.linalg.norm(centers - c, axis=1).max())
    if r <= 1e-6:
        r = 1.0
    return c, r


def init_from_points(positions, colors, center, radius, opacity=0.1):
    """Isotropic Gaussians at the given points; scale = mean 3-NN distance."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if n == 0:
        raise ValidationError("cannot initialise Gaussians from zero points")
    if n > 1:
        kk = min(4, n)
        dist, _ = cKDTree(positions).query(positions, k=kk)
        scale = dist[:, 1:].mean(axis=1)
        scale = np.maximum(scale, 1e-7 * radius)
    else:
        scale = np.full(1, 0.01 * radius)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        positions.copy(),
        quats,
        np.repeat(np.log(scale)[:, None], 3, axis=1),
        np.full(n, logit(opacity)),
        np.clip(np.asarray(colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0),
        center,
        radius,
    )


def holdout_split(view_ids, every=8):
    """``(train, test)`` ids: every ``every``-th view (index 0, every, ...) is held out."""
    ids = sorted(view_ids)
    if every <= 0:
        return ids, []
    test = [v for i, v in enumerate(ids) if i % every == 0]
    train = [v for i, v in enumerate(ids) if i % every != 0]
    return train, test


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainResult:
    gaussians: GaussianSet
    history: list = field(default_factory=list)  # (iteration, view, loss, photometric, mv, count)
    initial_count: int = 0


def train(gs, views, images, cfg, neighbors=None, backend=None):
    """Optimise ``gs`` against ``views``/``images`` (parallel lists).

    ``neighbors`` maps view id to a list of ``(CameraView, image)`` used by
    the multi-view term once ``cfg.mv_start`` is reached.
    """
    if not views:
        raise ValidationError("no training views")
    gs = gs.copy()
    rng = np.random.default_rng(cfg.rng_seed)
    adam = Adam(gs)
    stats = DensifyStats.zeros(len(gs))
    result = TrainResult(gs, [], len(gs))
    order = []
    decay = np.log(cfg.lr_position_decay) if cfg.lr_position_decay > 0 else 0.0
    for it in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(len(views)))
        k = order.pop()
        view, target = views[k], images[k]
        nb = None
        if cfg.use_mv and neighbors and it >= cfg.mv_start:
            nb = neighbors.get(view.id)
        bundle = compute_gradients(gs, view, target, cfg, nb, rng, backend)
        frac = it / max(cfg.iterations - 1, 1)
        lrs = {
            "means": cfg.lr_position * gs.radius * np.exp(decay * frac),
            "quats": cfg.lr_rotation,
            "log_scales": cfg.lr_scale,
            "opacity_logits": cfg.lr_opacity,
            "colors": cfg.lr_color,
        }
        adam.step(gs, bundle.grads, lrs)
        gs.quats = gs.quats / np.linalg.norm(gs.quats, axis=1, keepdims=True)
        gs.colors = np.clip(gs.colors, 0.0, 1.0)
        stats.add(bundle.grads)
        result.history.append((it, view.id, bundle.loss, bundle.photometric, bundle.mv, len(gs)))
        if cfg.densify_due(it):
            res = densify_control(gs, stats, cfg, it, rng)
        else:
            res = None
        if res is not None:
            n_new = len(res.gaussians) - len(res.kept)
            adam.remap(res.kept, n_new)
            gs = res.gaussians
            stats = DensifyStats.zeros(len(gs))
            log.debug(
                "iter %d: +%d clone, %d split, -%d pruned -> %d",
                it, res.n_cloned, res.n_split, res.n_pruned, len(gs),
            )
            if len(gs) == 0:
                raise ValidationError(f"densification at iteration {it} removed every Gaussian")
    result.gaussians = gs
    return result


def write_loss_csv(history, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "view", "loss", "photometric", "multiview", "gaussians"])
        for it, vid, loss, lp, lmv, n in history:
            w.writerow([it, vid, f"{loss:.8f}", f"{lp:.8f}", f"{lmv:.8f}", n])


def _region_neighbors(graph, train_ids, view_by_id, image_by_id, n):
    sub = graph.subgraph(train_ids)
    return {
        v: [(view_by_id[u], image_by_id[u]) for u in top_neighbors(sub, v, n)]
        for v in train_ids
    }


def region_training_set(model, partition, region, cfg):
    """Training view ids and point indices for one region."""
    if not 0 <= region < partition.k:
        raise ValidationError(f"region {region} outside [0, {partition.k})")
    cams = partition.cameras(region)
    if not cams:
        raise ValidationError(f"region {region} has no cameras")
    train_all, _ = holdout_split(model.view_ids, cfg.holdout_every)
    train_set = set(train_all)
    train_ids = [v for v in cams if v in train_set]
    if not train_ids:
        raise ValidationError(f"region {region} has no training cameras after the hold-out split")
    if len(cams) < 2:
        log.warning("region %d has a single camera", region)
    pts = partition.points(region)
    if not pts:
        raise ValidationError(f"region {region} has no sparse points")
    return cams, train_ids, pts


def train_region(model, partition, region, cfg, images, graph=None, backend=None):
    """Train region ``region`` and return a :class:`TrainResult`.

    ``images`` maps view id to its (H, W, 3) float image.
    """
    cams, train_ids, pts = region_training_set(model, partition, region, cfg)
    center, radius = scene_bounds([model.view(v) for v in cams])
    positions = model.positions()[pts]
    colors = model.colors()[pts]
    gs = init_from_points(positions, colors, center, radius, cfg.init_opacity)
    views = [model.view(v) for v in train_ids]
    imgs = [np.asarray(images[v], dtype=np.float64) for v in train_ids]
    nb = None
    if cfg.use_mv:
        graph = graph if graph is not None else build_graph(model)
        nb = _region_neighbors(graph, train_ids, {v.id: v for v in views}, dict(zip(train_ids, imgs)), cfg.mv_neighbors)
    log.info("region %d: %d views, %d Gaussians at start", region, len(views), len(gs))
    return train(gs, views, imgs, cfg, nb, backend)


def downsample_image(img, factor):
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[0] // factor, img.shape[1] // factor
    crop = img[: h * factor, : w * factor]
    return crop.reshape(h, factor, w, factor, -1).mean(axis=(1, 3))


def voxel_downsample(positions, colors, target):
    """Average points per voxel, bisecting the voxel size so about ``target`` remain."""
    positions = np.asarray(positions, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    n = len(positions)
    if n <= target or n == 0:
        return positions.copy(), colors.copy()

    def bucket(size):
        keys = np.floor((positions - positions.min(axis=0)) / size).astype(np.int64)
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        return inv.ravel()

    extent = float(np.ptp(positions, axis=0).max()) or 1.0
    lo, hi = 0.0, extent * 2.0
    inv = bucket(hi)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        cand = bucket(mid)
        if cand.max() + 1 > target:
            lo = mid
        else:
            hi, inv = mid, cand
    m = inv.max() + 1
    cnt = np.bincount(inv, minlength=m).astype(np.float64)
    pos = np.stack([np.bincount(inv, positions[:, j], m) for j in range(3)], axis=1) / cnt[:, None]
    col = np.stack([np.bincount(inv, colors[:, j], m) for j in range(3)], axis=1) / cnt[:, None]
    return pos, col


COARSE_FACTOR = 4


def coarse_config(cfg):
    return replace(cfg, iterations=max(1, cfg.iterations // COARSE_FACTOR), densify=False, use_mv=False)


def train_global_coarse(model, cfg, images, backend=None):
    """Coarse set over the whole scene: fewer points, smaller images, no densification."""
    ccfg = coarse_config(cfg)
    train_ids, _ = holdout_split(model.view_ids, cfg.holdout_every)
    if not train_ids:
        raise ValidationError("no training views for the global set")
    center, radius = scene_bounds(model.views)
    pos, col = voxel_downsample(model.positions(), model.colors(), max(1, len(model.points) // COARSE_FACTOR))
    gs = init_from_points(pos, col, center, radius, cfg.init_opacity)
    views = [model.view(v).downsampled(COARSE_FACTOR) for v in train_ids]
    imgs = [downsample_image(images[v], COARSE_FACTOR) for v in train_ids]
    log.info("global coarse: %d views, %d Gaussians", len(views), len(gs))
    return train(gs, views, imgs, ccfg, None, backend)

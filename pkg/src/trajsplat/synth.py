"""Seeded synthetic scenes with known Gaussians, cameras and sparse points.

Three layouts are available.  ``street`` drives cameras along the x axis past
a textured facade, ``orbit`` circles a compact blob, and ``grid`` looks
straight down on a ground slab from a lawnmower pattern.  A fraction of the
Gaussians can be moved into a far cluster roughly ten scene radii away
(above the facade for ``street``) so that distance-dependent behaviour has
something to act on.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, ValidationError
from .geometry import look_at
from .scene_io import CameraView, SparseModel, SparsePoint, derive_covisibility_edges, to_bytes
from .splat.gaussians import GaussianSet, logit
from .splat.raster import rasterize

log = logging.getLogger(__name__)

KINDS = ("orbit", "street", "grid")
MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class SynthConfig:
    num_gaussians: int = 300
    trajectory_kind: str = "street"
    num_views: int = 24
    image_size: int = 96
    rng_seed: int = 0
    far_cluster_fraction: float = 0.0
    points_per_gaussian: int = 2
    point_noise: float = 0.0
    slab_thickness: float = 0.4
    street_length: float = 12.0
    street_depth: float = 4.0

    def __post_init__(self):
        if self.num_gaussians < 1:
            raise ValidationError("num_gaussians must be >= 1")
        if self.num_views < 2:
            raise ValidationError("num_views must be >= 2")
        if self.trajectory_kind not in KINDS:
            raise ValidationError(f"trajectory_kind must be one of {', '.join(KINDS)}")
        if not 0.0 <= self.far_cluster_fraction <= 1.0:
            raise ValidationError("far_cluster_fraction must lie in [0, 1]")
        if self.image_size < 8:
            raise ValidationError("image_size must be >= 8")
        if self.points_per_gaussian < 1:
            raise ValidationError("points_per_gaussian must be >= 1")


def _intrinsics(size):
    f = 0.8 * size
    c = (size - 1) / 2.0
    return dict(fx=f, fy=f, cx=c, cy=c, width=size, height=size)


def _cameras(cfg):
    kind, n = cfg.trajectory_kind, cfg.num_views
    intr = _intrinsics(cfg.image_size)
    views = []
    if kind == "street":
        half = cfg.street_length / 2.0
        xs = np.linspace(-half, half, n)
        for i, x in enumerate(xs):
            R, t = look_at((x, 0.0, 0.0), (x, cfg.street_depth, 0.0))
            views.append(CameraView(id=i + 1, rotation=R, translation=t, **intr))
    elif kind == "orbit":
        for i in range(n):
            a = 2.0 * np.pi * i / n
            eye = 4.0 * np.array([np.cos(a) * np.cos(0.35), np.sin(a) * np.cos(0.35), np.sin(0.35)])
            R, t = look_at(eye, (0.0, 0.0, 0.0))
            views.append(CameraView(id=i + 1, rotation=R, translation=t, **intr))
    else:
        cols = int(np.ceil(np.sqrt(n)))
        for i in range(n):
            r, c = divmod(i, cols)
            x = (c - (cols - 1) / 2.0) * 1.0
            y = (r - (cols - 1) / 2.0) * 1.0
            # serpentine order keeps consecutive ids adjacent
            if r % 2:
                x = -x
            R, t = look_at((x, y, 4.0), (x, y, 0.0), up=(0.0, 1.0, 0.0))
            views.append(CameraView(id=i + 1, rotation=R, translation=t, **intr))
    return views


def _near_layout(cfg, n, rng):
    """Means and base scales for the near content, plus its centre and radius."""
    if cfg.trajectory_kind == "street":
        half = cfg.street_length / 2.0
        height = 0.625 * cfg.street_depth
        top = 0.1 * height if cfg.far_cluster_fraction > 0 else height
        lo = np.array([-half, cfg.street_depth - cfg.slab_thickness / 2, -height])
        hi = np.array([half, cfg.street_depth + cfg.slab_thickness / 2, top])
        means = rng.uniform(lo, hi, size=(n, 3))
        area = (hi[0] - lo[0]) * (hi[2] - lo[2])
        spacing = np.sqrt(area / max(n, 1))
        scales = np.stack(
            [
                rng.uniform(0.5, 0.9, n) * spacing,
                np.full(n, max(cfg.slab_thickness, 0.02) * 0.3),
                rng.uniform(0.5, 0.9, n) * spacing,
            ],
            axis=1,
        )
    elif cfg.trajectory_kind == "orbit":
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        means = d * rng.uniform(0.0, 1.0, (n, 1)) ** (1 / 3)
        spacing = (4.0 / 3.0 * np.pi / max(n, 1)) ** (1 / 3)
        scales = rng.uniform(0.4, 0.8, (n, 3)) * spacing
        lo, hi = -np.ones(3), np.ones(3)
    else:
        cols = int(np.ceil(np.sqrt(cfg.num_views)))
        # cameras at height 4 see 2.5 units either side; pad past that so
        # every view looks at slab only
        half = (cols - 1) / 2.0 + 2.75
        lo = np.array([-half, -half, -cfg.slab_thickness / 2])
        hi = np.array([half, half, cfg.slab_thickness / 2])
        means = rng.uniform(lo, hi, size=(n, 3))
        spacing = np.sqrt((2 * half) ** 2 / max(n, 1))
        scales = np.stack(
            [
                rng.uniform(0.5, 0.9, n) * spacing,
                rng.uniform(0.5, 0.9, n) * spacing,
                np.full(n, max(cfg.slab_thickness, 0.02) * 0.3),
            ],
            axis=1,
        )
    center = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo))
    return means, scales, center, radius


def _far_layout(cfg, n, center, radius, rng):
    dist = 10.0 * radius
    if cfg.trajectory_kind == "street":
        # band above the facade, filling the upper part of every view
        half_w = 0.6 * dist + cfg.street_length / 2.0
        lo = np.array([-half_w, cfg.street_depth + dist, 0.12 * dist])
        hi = np.array([half_w, cfg.street_depth + dist + 0.05 * dist, 0.55 * dist])
        means = rng.uniform(lo, hi, size=(n, 3))
        area = (hi[0] - lo[0]) * (hi[2] - lo[2])
    else:
        a = rng.uniform(0.0, 2.0 * np.pi, n)
        elev = rng.uniform(0.05, 0.35, n)
        means = center + dist * np.stack([np.cos(a) * np.cos(elev), np.sin(a) * np.cos(elev), np.sin(elev)], axis=1)
        area = 2.0 * np.pi * dist * 0.3 * dist
    spacing = np.sqrt(area / max(n, 1))
    scales = rng.uniform(0.5, 0.8, (n, 3)) * spacing
    return means, scales


def _colors(means, rng):
    # smooth colour field plus per-Gaussian variation gives texture at all scales
    base = 0.5 + 0.35 * np.stack(
        [
            np.sin(0.9 * means[:, 0] + 0.3 * means[:, 2]),
            np.sin(0.7 * means[:, 2] - 0.5 * means[:, 0] + 1.0),
            np.cos(0.6 * means[:, 0] + 0.8 * means[:, 2]),
        ],
        axis=1,
    )
    return np.clip(base + rng.uniform(-0.15, 0.15, base.shape), 0.02, 0.98)


def _random_quats(n, rng, flat_axis=None):
    if flat_axis is not None:
        # rotate only about the slab normal so the thin axis stays aligned
        ang = rng.uniform(0.0, np.pi, n)
        q = np.zeros((n, 4))
        q[:, 0] = np.cos(ang / 2)
        q[:, 1 + flat_axis] = np.sin(ang / 2)
        return q
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def _camera_inside(gs, views):
    R = gs.rotations()
    inv_s = np.exp(-gs.log_scales)
    for v in views:
        local = np.einsum("nji,nj->ni", R, v.center - gs.means) * inv_s
        if np.any(np.sum(local * local, axis=1) < 1.0):
            return True
    return False


def _build_gaussians(cfg, views, rng):
    n_far = int(round(cfg.far_cluster_fraction * cfg.num_gaussians))
    n_far = min(n_far, cfg.num_gaussians - 1)
    n_near = cfg.num_gaussians - n_far
    means, scales, center, radius = _near_layout(cfg, n_near, rng)
    flat = {"street": 1, "grid": 2}.get(cfg.trajectory_kind)
    quats = _random_quats(n_near, rng, flat)
    if n_far:
        fm, fs = _far_layout(cfg, n_far, center, radius, rng)
        means = np.concatenate([means, fm])
        scales = np.concatenate([scales, fs])
        quats = np.concatenate([quats, _random_quats(n_far, rng)])
    n = len(means)
    opac = rng.uniform(0.6, 0.95, n)
    cam_c = np.stack([v.center for v in views])
    c = cam_c.mean(axis=0)
    r = 1.1 * float(np.linalg.norm(cam_c - c, axis=1).max()) or 1.0
    return GaussianSet(means, quats, np.log(scales), logit(opac), _colors(means, rng), c, r)


def _proxy_points(cfg, gs, views, depth_maps, rng):
    per = cfg.points_per_gaussian
    R = gs.rotations()
    s = np.exp(gs.log_scales)
    z = rng.standard_normal((len(gs), per, 3)) * 0.5
    pts = gs.means[:, None, :] + np.einsum("nij,nkj->nki", R, s[:, None, :] * z)
    pts = pts.reshape(-1, 3)
    cols = np.repeat(gs.colors, per, axis=0)
    if cfg.point_noise > 0:
        pts = pts + rng.normal(0.0, cfg.point_noise, pts.shape)
    observers = [[] for _ in range(len(pts))]
    for v, depth in zip(views, depth_maps):
        uv, zc = v.project(pts)
        px = np.round(uv[:, 0]).astype(np.int64)
        py = np.round(uv[:, 1]).astype(np.int64)
        inside = (zc > 0.01) & (px >= 0) & (px < v.width) & (py >= 0) & (py < v.height)
        idx = np.flatnonzero(inside)
        d = depth[py[idx], px[idx]]
        tol = 0.1 * d + 0.5 * max(cfg.slab_thickness, 0.1)
        seen = idx[(d <= 0) | (zc[idx] <= d + tol)]
        for i in seen:
            observers[i].append(v.id)
    keep = [i for i in range(len(pts)) if observers[i]]
    points = []
    for new_id, i in enumerate(keep, start=1):
        c8 = tuple(int(b) for b in to_bytes(cols[i]))
        points.append(SparsePoint(new_id, pts[i], c8, tuple(sorted(observers[i])), 0.0))
    return points


def generate_synthetic_scene(cfg):
    """Return ``(ground_truth_set, sparse_model, images)``; images follow view order."""
    rng = np.random.default_rng(cfg.rng_seed)
    views = _cameras(cfg)
    for attempt in range(MAX_ATTEMPTS):
        gs = _build_gaussians(cfg, views, rng)
        if not _camera_inside(gs, views):
            break
        log.debug("attempt %d: a camera sits inside a Gaussian, regenerating", attempt)
    else:
        raise DegenerateGeometryError(f"no valid scene after {MAX_ATTEMPTS} attempts")
    images, depths = [], []
    for v in views:
        buf = rasterize(gs, v)
        images.append(np.clip(buf.color, 0.0, 1.0))
        depths.append(buf.depth)
    points = _proxy_points(cfg, gs, views, depths, rng)
    model = SparseModel(views, points, [])
    model = SparseModel(views, points, derive_covisibility_edges(model))
    return gs, model, images


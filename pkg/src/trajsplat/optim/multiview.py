"""Plane-induced homography warping and the patch NCC consistency loss.

Every rendered pixel defines a local plane from its depth and normal.  The
plane maps a small patch around the pixel into a neighbouring camera; the
loss is ``1 - NCC`` between the reference patch and the bilinearly sampled
neighbour patch, and it is differentiable in the rendered depth and normal.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateGeometryError, ValidationError
from ..splat.project import Z_NEAR
from ..splat.raster import get_kernels
from .metrics import grayscale

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-8
W_EPS = 1e-12
OPACITY_GATE = 0.5


@dataclass(frozen=True)
class PixelPlane:
    normal: np.ndarray  # unit, camera frame, facing the camera
    d: float  # n . X + d = 0 for points X on the plane
    point: np.ndarray  # back-projected pixel


@dataclass(frozen=True)
class Patch:
    center: tuple
    half_width: int
    intensities: np.ndarray


def relative_pose(ref, src):
    """``(R, t)`` with ``X_src = R X_ref + t`` (camera coordinates)."""
    R = src.rotation @ ref.rotation.T
    return R, src.translation - R @ ref.translation


def pixel_plane(buffers, view, p, min_opacity=OPACITY_GATE):
    """Plane through pixel ``p``'s rendered surface point, or None when unreliable."""
    x, y = int(round(p[0])), int(round(p[1]))
    if not (0 <= x < view.width and 0 <= y < view.height):
        return None
    if buffers.accum_opacity[y, x] <= min_opacity:
        return None
    n = np.asarray(buffers.normal[y, x], dtype=np.float64)
    if np.linalg.norm(n) < 0.5:
        return None
    X = buffers.depth[y, x] * (view.K_inv @ np.array([x, y, 1.0]))
    d = -float(n @ X)
    if d <= Z_NEAR:
        return None
    return PixelPlane(n, d, X)


def homography(ref, src, plane):
    if abs(plane.d) < 1e-6:
        raise DegenerateGeometryError(f"plane distance {plane.d:g} is too close to zero")
    R, t = relative_pose(ref, src)
    return src.K @ (R - np.outer(t, plane.normal) / plane.d) @ ref.K_inv


def warp_pixel(H, p, width=None, height=None):
    """``H p`` in pixel coordinates; None if degenerate or outside the image."""
    h = np.asarray(H) @ np.array([p[0], p[1], 1.0])
    if abs(h[2]) < W_EPS:
        return None
    u, v = h[0] / h[2], h[1] / h[2]
    if width is not None and not (0.0 <= u <= width - 1):
        return None
    if height is not None and not (0.0 <= v <= height - 1):
        return None
    return np.array([u, v])


def extract_patch(gray, p, half_width):
    x, y = int(p[0]), int(p[1])
    h, w = gray.shape
    if x - half_width < 0 or y - half_width < 0 or x + half_width >= w or y + half_width >= h:
        return None
    vals = gray[y - half_width : y + half_width + 1, x - half_width : x + half_width + 1]
    return Patch((x, y), half_width, vals.ravel().copy())


def ncc(a, b):
    """Normalized cross-correlation of two patches; None below the variance floor."""
    va = np.asarray(getattr(a, "intensities", a), dtype=np.float64).ravel()
    vb = np.asarray(getattr(b, "intensities", b), dtype=np.float64).ravel()
    if va.shape != vb.shape:
        raise ValidationError("patch sizes differ")
    da, db = va - va.mean(), vb - vb.mean()
    sa, sb = float(da @ da), float(db @ db)
    if sa / va.size < VAR_FLOOR or sb / vb.size < VAR_FLOOR:
        return None
    return float(np.clip(da @ db / np.sqrt(sa * sb), -1.0, 1.0))


@dataclass
class MVResult:
    loss: float
    g_depth: np.ndarray
    g_normal: np.ndarray
    n_pairs: int


def _as_gray(img):
    img = np.asarray(img, dtype=np.float64)
    return grayscale(img) if img.ndim == 3 else img


def loss_mv(buffers, view, image, neighbors, half_width=3, samples=1024, rng=None,
            min_opacity=OPACITY_GATE, pixels=None, backend=None):
    """Mean ``1 - NCC`` over valid (pixel, neighbour) pairs plus buffer gradients.

    ``neighbors`` is a list of ``(CameraView, image)``.  ``pixels`` (an (S, 2)
    int array of x, y) overrides random sampling.
    """
    H_img, W_img = view.height, view.width
    g_depth = np.zeros((H_img, W_img))
    g_normal = np.zeros((H_img, W_img, 3))
    empty = MVResult(0.0, g_depth, g_normal, 0)
    if not neighbors:
        return empty
    hw = int(half_width)
    ref_gray = _as_gray(image)

    if pixels is None:
        mask = (buffers.accum_opacity > min_opacity) & (np.linalg.norm(buffers.normal, axis=-1) > 0.5)
        mask[:hw, :] = False
        mask[:, :hw] = False
        mask[H_img - hw :, :] = False
        mask[:, W_img - hw :] = False
        cand = np.flatnonzero(mask)
        if len(cand) == 0:
            log.debug("multi-view loss: no pixel passes the opacity gate")
            return empty
        rng = rng if rng is not None else np.random.default_rng(0)
        if len(cand) > samples:
            cand = np.sort(rng.choice(cand, size=samples, replace=False))
        py, px = np.divmod(cand, W_img)
    else:
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        px, py = pixels[:, 0], pixels[:, 1]

    D = buffers.depth[py, px]
    n = buffers.normal[py, px]
    r = np.stack([px, py, np.ones_like(px)], axis=1).astype(np.float64) @ view.K_inv.T
    d = -D * np.sum(n * r, axis=1)
    ok = d > Z_NEAR

    off = np.arange(-hw, hw + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    ox, oy = ox.ravel(), oy.ravel()
    qx = px[:, None] + ox[None, :]
    qy = py[:, None] + oy[None, :]
    A = ref_gray[np.clip(qy, 0, H_img - 1), np.clip(qx, 0, W_img - 1)]
    a = A - A.mean(axis=1, keepdims=True)
    Sa = np.sum(a * a, axis=1)
    P = a.shape[1]
    ok &= Sa / P >= VAR_FLOOR
    ok &= (qx.min(axis=1) >= 0) & (qy.min(axis=1) >= 0) & (qx.max(axis=1) < W_img) & (qy.max(axis=1) < H_img)
    if not ok.any():
        log.debug("multi-view loss: no valid samples")
        return empty

    sel = np.flatnonzero(ok)
    D, n, r, d, a, Sa = D[sel], n[sel], r[sel], d[sel], a[sel], Sa[sel]
    qx = np.ascontiguousarray(qx[sel], dtype=np.float64)
    qy = np.ascontiguousarray(qy[sel], dtype=np.float64)
    a = np.ascontiguousarray(a)
    m = n / d[:, None]
    Kr_inv = view.K_inv
    v_vec = np.ascontiguousarray(m @ Kr_inv)  # rows: (Kr^-T m)^T
    warp = get_kernels(backend).warp_ncc

    total, n_pairs = 0.0, 0
    G_v = np.zeros_like(m)
    for src_view, src_img in neighbors:
        src_gray = np.ascontiguousarray(_as_gray(src_img))
        R, t = relative_pose(view, src_view)
        # H q = base q - u (v . q), without forming per-sample matrices
        u_vec = np.ascontiguousarray(src_view.K @ t)
        base = np.ascontiguousarray(src_view.K @ R @ Kr_inv)
        term, valid, g_v = warp(src_gray, base, u_vec, v_vec, qx, qy, a, Sa, VAR_FLOOR, W_EPS)
        total += float(term.sum())
        n_pairs += int(np.count_nonzero(valid))
        G_v += g_v
    if n_pairs == 0:
        log.debug("multi-view loss: every warped patch was skipped")
        return empty
    loss = total / n_pairs

    G_m = (G_v / n_pairs) @ Kr_inv.T
    Gm_n = np.sum(G_m * n, axis=1)
    G_n = G_m / d[:, None] + (Gm_n * D / d**2)[:, None] * r
    G_D = Gm_n * np.sum(n * r, axis=1) / d**2
    ys, xs = py[sel], px[sel]
    g_depth[ys, xs] += G_D
    g_normal[ys, xs] += G_n
    return MVResult(loss, g_depth, g_normal, n_pairs)

"""Depth-sorted alpha compositing into colour, depth, normal and opacity buffers.

The per-pixel loops live in ``_raster`` (Cython) when it was built, else in
``_raster_py``.  Set ``TRAJSPLAT_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _raster_py
from .gaussians import sigmoid
from .project import Projection, project_all, project_backward

try:
    if os.environ.get("TRAJSPLAT_PURE_PYTHON", "") == "1":
        raise ImportError("pure-python backend requested")
    from . import _raster as _raster_c
except ImportError:
    _raster_c = None

KERNELS = {"python": _raster_py}
if _raster_c is not None:
    KERNELS["cython"] = _raster_c
BACKEND = "cython" if _raster_c is not None else "python"

OPACITY_EPS = 1e-4
N_FEAT = 8  # r, g, b, depth, nx, ny, nz, 1


def get_kernels(name=None):
    return KERNELS[name or BACKEND]


@dataclass
class FrameBuffers:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), normalized by accumulated opacity
    normal: np.ndarray  # (H, W, 3), unit, camera frame
    accum_opacity: np.ndarray  # (H, W)


@dataclass
class RenderState:
    """Everything the backward pass needs from one forward render."""

    view: object
    background: np.ndarray
    proj: Projection
    order: np.ndarray  # sorted indices of visible Gaussians
    means2d: np.ndarray
    conics: np.ndarray
    alphas: np.ndarray
    feats: np.ndarray
    bbox: np.ndarray
    accum: np.ndarray
    T: np.ndarray
    last: np.ndarray
    n_total: int
    backend: str


@dataclass
class GaussianGrads:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    mean2d_ndc: np.ndarray  # |dL/d mean2d| in NDC units, per Gaussian
    visible: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(n, dtype=bool))

    def __iadd__(self, other):
        self.means += other.means
        self.quats += other.quats
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.colors += other.colors
        return self


def sort_order(gs, proj):
    """Visible indices sorted by depth, then position, then input index."""
    idx = np.flatnonzero(proj.visible)
    m = gs.means[idx]
    keys = (idx, m[:, 2], m[:, 1], m[:, 0], proj.pc[idx, 2])
    return idx[np.lexsort(keys)]


def reach_boxes(mean2d, cov2d, alphas, width, height):
    """Inclusive pixel boxes outside of which alpha * G < 1/255.

    One pixel of slack absorbs rounding in the conic inverse.
    """
    with np.errstate(divide="ignore"):
        qmax = 2.0 * np.log(255.0 * alphas)
    ok = qmax >= 0
    qmax = np.where(ok, qmax, 0.0)
    rx = np.sqrt(qmax * cov2d[:, 0, 0])
    ry = np.sqrt(qmax * cov2d[:, 1, 1])
    x0 = np.maximum(0, np.floor(mean2d[:, 0] - rx) - 1)
    x1 = np.minimum(width - 1, np.ceil(mean2d[:, 0] + rx) + 1)
    y0 = np.maximum(0, np.floor(mean2d[:, 1] - ry) - 1)
    y1 = np.minimum(height - 1, np.ceil(mean2d[:, 1] + ry) + 1)
    box = np.stack([x0, x1, y0, y1], axis=1)
    box[~ok] = (1, 0, 1, 0)
    return np.ascontiguousarray(box.astype(np.int32))


def render(gs, view, background=(0.0, 0.0, 0.0), backend=None):
    """Forward pass; returns ``(FrameBuffers, RenderState)``."""
    gs.validate()
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project_all(gs, view)
    order = sort_order(gs, proj)
    alphas = sigmoid(gs.opacity_logits[order])
    means2d = np.ascontiguousarray(proj.mean2d[order])
    conics = np.ascontiguousarray(proj.conic[order])
    feats = np.empty((len(order), N_FEAT))
    feats[:, 0:3] = gs.colors[order]
    feats[:, 3] = proj.pc[order, 2]
    feats[:, 4:7] = proj.normal[order]
    feats[:, 7] = 1.0
    bbox = reach_boxes(means2d, proj.cov2d[order], alphas, view.width, view.height)

    name = backend or BACKEND
    accum, T, last = KERNELS[name].forward(
        means2d, conics, np.ascontiguousarray(alphas), feats, bbox, view.width, view.height
    )
    state = RenderState(view, bg, proj, order, means2d, conics, alphas, feats, bbox, accum, T, last, len(gs), name)
    return buffers_from_state(state), state


def buffers_from_state(state):
    acc, T = state.accum, state.T
    O = acc[..., 7]
    color = acc[..., 0:3] + T[..., None] * state.background
    covered = O > OPACITY_EPS
    depth = np.where(covered, acc[..., 3] / np.where(covered, O, 1.0), 0.0)
    S = acc[..., 4:7]
    norm = np.linalg.norm(S, axis=-1)
    has_n = covered & (norm > 1e-12)
    normal = np.where(has_n[..., None], S / np.where(has_n, norm, 1.0)[..., None], 0.0)
    return FrameBuffers(color, depth, normal, O)


def rasterize(gs, view, background=(0.0, 0.0, 0.0), backend=None):
    buffers, _ = render(gs, view, background, backend)
    return buffers


def backward(state, g_color, g_depth=None, g_normal=None, g_accum_opacity=None):
    """Gradients of a scalar loss w.r.t. every Gaussian parameter.

    The ``g_*`` arguments are the loss gradients w.r.t. the matching
    :class:`FrameBuffers` fields (``None`` = zero).
    """
    view = state.view
    h, w = view.height, view.width
    acc = state.accum
    O = acc[..., 7]
    g_acc = np.zeros((h, w, N_FEAT))
    g_acc[..., 0:3] = g_color
    g_T = np.ascontiguousarray(g_color @ state.background)
    covered = O > OPACITY_EPS
    safe_O = np.where(covered, O, 1.0)
    if g_depth is not None:
        gd = np.where(covered, g_depth, 0.0)
        depth = acc[..., 3] / safe_O
        g_acc[..., 3] += gd / safe_O
        g_acc[..., 7] -= gd * depth / safe_O
    if g_normal is not None:
        S = acc[..., 4:7]
        norm = np.linalg.norm(S, axis=-1)
        has_n = covered & (norm > 1e-12)
        safe = np.where(has_n, norm, 1.0)
        N = S / safe[..., None]
        gn = np.where(has_n[..., None], g_normal, 0.0)
        g_acc[..., 4:7] += (gn - N * np.sum(N * gn, axis=-1, keepdims=True)) / safe[..., None]
    if g_accum_opacity is not None:
        g_acc[..., 7] += g_accum_opacity

    grads = GaussianGrads.zeros(state.n_total)
    order = state.order
    grads.visible[order] = True
    if len(order) == 0:
        return grads
    g_m2d, g_con, g_alpha, g_feat = KERNELS[state.backend].backward(
        state.means2d, state.conics, state.alphas, state.feats, state.bbox, w, h,
        state.T, state.last, np.ascontiguousarray(g_acc), g_T,
    )
    a = state.alphas
    grads.opacity_logits[order] = g_alpha * a * (1.0 - a)
    grads.colors[order] = g_feat[:, 0:3]
    g_means, g_quats, g_ls = project_backward(state.proj, view, order, g_m2d, g_con, g_feat[:, 3], g_feat[:, 4:7])
    grads.means[order] = g_means
    grads.quats[order] = g_quats
    grads.log_scales[order] = g_ls
    ndc = g_m2d * np.array([0.5 * w, 0.5 * h])
    grads.mean2d_ndc[order] = np.linalg.norm(ndc, axis=1)
    return grads

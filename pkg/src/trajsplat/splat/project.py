"""Perspective projection of 3D Gaussians and its backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import quat_to_rotmat

Z_NEAR = 0.01
DILATION = 0.3  # px^2 added to the projected covariance diagonal
CULL_SIGMA = 3.0


@dataclass
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    index: int


@dataclass
class Projection:
    """Batch projection of every Gaussian in a set into one view.

    Rows for culled Gaussians hold garbage; consult ``visible``.
    """

    pc: np.ndarray  # camera-space centres (N, 3)
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), dilated
    conic: np.ndarray  # (N, 3) upper triangle of the inverse
    J: np.ndarray  # (N, 2, 3)
    cov_cam: np.ndarray  # (N, 3, 3) W Sigma W^T
    R: np.ndarray  # (N, 3, 3) Gaussian rotations
    s2: np.ndarray  # (N, 3) squared scales
    quat_unit: np.ndarray
    quat_norm: np.ndarray
    normal: np.ndarray  # (N, 3) camera frame, facing the camera
    normal_axis: np.ndarray
    normal_sign: np.ndarray
    visible: np.ndarray

    @property
    def depth(self):
        return self.pc[:, 2]


def project_all(gs, view):
    n = len(gs)
    W = view.rotation
    pc = gs.means @ W.T + view.translation
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    in_front = z > Z_NEAR
    zs = np.where(in_front, z, 1.0)

    qn = np.linalg.norm(gs.quats, axis=1) if n else np.zeros(0)
    qu = gs.quats / qn[:, None] if n else np.zeros((0, 4))
    R = quat_to_rotmat(qu) if n else np.zeros((0, 3, 3))
    s2 = np.exp(2.0 * gs.log_scales)
    cov3 = (R * s2[:, None, :]) @ np.swapaxes(R, 1, 2)
    cov_cam = W @ cov3 @ W.T

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = view.fx / zs
    J[:, 0, 2] = -view.fx * x / zs**2
    J[:, 1, 1] = view.fy / zs
    J[:, 1, 2] = -view.fy * y / zs**2
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION

    mean2d = np.stack([view.fx * x / zs + view.cx, view.fy * y / zs + view.cy], axis=1)
    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    conic = np.stack([C / det, -B / det, A / det], axis=1)

    ex = CULL_SIGMA * np.sqrt(A)
    ey = CULL_SIGMA * np.sqrt(C)
    misses = (
        (mean2d[:, 0] + ex < -0.5)
        | (mean2d[:, 0] - ex > view.width - 0.5)
        | (mean2d[:, 1] + ey < -0.5)
        | (mean2d[:, 1] - ey > view.height - 0.5)
    )
    visible = in_front & ~misses & (det > 0)

    axis = np.argmin(gs.log_scales, axis=1) if n else np.zeros(0, dtype=int)
    n_world = R[np.arange(n), :, axis]
    n_cam = n_world @ W.T
    sign = np.where(np.einsum("ij,ij->i", n_cam, pc) > 0, -1.0, 1.0)
    normal = n_cam * sign[:, None]

    return Projection(pc, mean2d, cov2d, conic, J, cov_cam, R, s2, qu, qn, normal, axis, sign, visible)


def project_gaussian(g, view):
    """Project a single Gaussian; ``None`` when culled."""
    from .gaussians import GaussianSet

    gs = GaussianSet([g.position], [g.rotation], [g.log_scales], [g.opacity_logit], [g.color], (0, 0, 0), 1.0)
    p = project_all(gs, view)
    if not p.visible[0]:
        return None
    return Projected2D(p.mean2d[0].copy(), p.cov2d[0].copy(), float(p.pc[0, 2]), 0)


def gaussian_normal(g, view):
    """Shortest scale axis of ``g`` in camera coordinates, turned to face the camera."""
    W = view.rotation
    R = quat_to_rotmat(g.rotation)
    axis = int(np.argmin(g.log_scales))
    n_cam = W @ R[:, axis]
    pc = W @ np.asarray(g.position, dtype=np.float64) + view.translation
    return -n_cam if n_cam @ pc > 0 else n_cam


def _dR_dq(q):
    """Partials of the rotation matrix w.r.t. a unit quaternion, shape (N, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    d = np.empty((len(q), 4, 3, 3))
    d[:, 0] = np.stack([np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)], 1)
    d[:, 1] = np.stack([np.stack([o, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)], 1)
    d[:, 2] = np.stack([np.stack([-2 * y, x, w], -1), np.stack([x, o, z], -1), np.stack([-w, z, -2 * y], -1)], 1)
    d[:, 3] = np.stack([np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, o], -1)], 1)
    return 2.0 * d


def project_backward(proj, view, idx, g_mean2d, g_conic, g_depth, g_normal):
    """Chain per-Gaussian screen-space gradients back to the 3D parameters.

    ``idx`` selects the Gaussians (rows of ``proj``) the gradients belong to.
    Returns ``(g_means, g_quats, g_log_scales)`` for those rows.
    """
    W = view.rotation
    pc = proj.pc[idx]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    J = proj.J[idx]
    M = proj.cov_cam[idx]
    R = proj.R[idx]
    s2 = proj.s2[idx]
    a, b, c = proj.conic[idx].T

    # conic -> 2D covariance; off-diagonal gradient is split over both entries
    K = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], 1)
    GK = np.stack(
        [np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1), np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], 1
    )
    G2 = -K @ GK @ K

    Jt = np.swapaxes(J, 1, 2)
    GM = Jt @ G2 @ J
    GJ = 2.0 * G2 @ J @ M
    G3 = W.T @ GM @ W

    D = s2[:, None, :]
    GR = 2.0 * (G3 @ (R * D))
    GD = np.einsum("nji,njk,nki->ni", R, G3, R)
    g_ls = 2.0 * s2 * GD

    rows = np.arange(len(idx))
    axis = proj.normal_axis[idx]
    sign = proj.normal_sign[idx]
    GR[rows, :, axis] += sign[:, None] * (g_normal @ W)

    fx, fy = view.fx, view.fy
    g_pc = np.zeros_like(pc)
    g_pc[:, 0] = GJ[:, 0, 2] * (-fx / z**2) + g_mean2d[:, 0] * fx / z
    g_pc[:, 1] = GJ[:, 1, 2] * (-fy / z**2) + g_mean2d[:, 1] * fy / z
    g_pc[:, 2] = (
        GJ[:, 0, 0] * (-fx / z**2)
        + GJ[:, 0, 2] * (2 * fx * x / z**3)
        + GJ[:, 1, 1] * (-fy / z**2)
        + GJ[:, 1, 2] * (2 * fy * y / z**3)
        - g_mean2d[:, 0] * fx * x / z**2
        - g_mean2d[:, 1] * fy * y / z**2
        + g_depth
    )
    g_means = g_pc @ W

    qu = proj.quat_unit[idx]
    g_qu = np.einsum("nkij,nij->nk", _dR_dq(qu), GR)
    g_q = (g_qu - qu * np.sum(qu * g_qu, axis=1, keepdims=True)) / proj.quat_norm[idx][:, None]
    return g_means, g_q, g_ls

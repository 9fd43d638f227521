"""Pure numpy compositing kernels (fallback for the compiled ``_raster``).

Both modules take the Gaussians already sorted front to back and share the
exact same per-pixel rules, so they agree to rounding.

Inputs
------
means2d (M, 2), conics (M, 3) = (a, b, c) of the inverse 2D covariance,
alphas (M,), feats (M, F) blended per pixel, bbox (M, 4) int32 inclusive
``x0, x1, y0, y1`` pixel ranges outside which a Gaussian cannot reach 1/255.
"""
import numpy as np

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_STOP = 1e-4


def _footprint(i, means2d, conics, alphas, bbox):
    x0, x1, y0, y1 = (int(v) for v in bbox[i])
    dx = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] - means2d[i, 0]
    dy = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] - means2d[i, 1]
    a, b, c = conics[i]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    g = np.exp(-0.5 * q)
    raw = alphas[i] * g
    return (slice(y0, y1 + 1), slice(x0, x1 + 1)), dx, dy, g, raw


def forward(means2d, conics, alphas, feats, bbox, width, height):
    n_feat = feats.shape[1]
    accum = np.zeros((height, width, n_feat))
    T = np.ones((height, width))
    last = np.full((height, width), -1, dtype=np.int32)
    for i in range(len(alphas)):
        if bbox[i, 0] > bbox[i, 1] or bbox[i, 2] > bbox[i, 3]:
            continue
        sl, _, _, _, raw = _footprint(i, means2d, conics, alphas, bbox)
        ah = np.minimum(raw, ALPHA_MAX)
        Tr = T[sl]
        use = (Tr >= T_STOP) & (ah >= ALPHA_MIN)
        if not use.any():
            continue
        w = np.where(use, ah * Tr, 0.0)
        accum[sl] += w[:, :, None] * feats[i]
        T[sl] = np.where(use, Tr * (1.0 - ah), Tr)
        last[sl] = np.where(use, i, last[sl])
    return accum, T, last


def backward(means2d, conics, alphas, feats, bbox, width, height, T_final, last, g_accum, g_T):
    m, n_feat = feats.shape
    g_means = np.zeros((m, 2))
    g_conics = np.zeros((m, 3))
    g_alphas = np.zeros(m)
    g_feats = np.zeros((m, n_feat))
    T = T_final.copy()
    S = g_T * T_final  # suffix of later contributions, background included
    for i in range(m - 1, -1, -1):
        if bbox[i, 0] > bbox[i, 1] or bbox[i, 2] > bbox[i, 3]:
            continue
        sl, dx, dy, g, raw = _footprint(i, means2d, conics, alphas, bbox)
        ah = np.minimum(raw, ALPHA_MAX)
        use = (last[sl] >= i) & (ah >= ALPHA_MIN)
        if not use.any():
            continue
        one_minus = 1.0 - ah
        Ti = np.where(use, T[sl] / one_minus, T[sl])
        ga = g_accum[sl]
        contrib = ga @ feats[i]
        w = np.where(use, ah * Ti, 0.0)
        g_feats[i] += np.einsum("yx,yxf->f", w, ga)
        d_ah = np.where(use, Ti * contrib - S[sl] / one_minus, 0.0)
        S[sl] += w * contrib
        T[sl] = Ti
        d_ah = np.where(raw <= ALPHA_MAX, d_ah, 0.0)
        g_alphas[i] += np.sum(d_ah * g)
        dq = d_ah * (-0.5 * ah)
        a, b, c = conics[i]
        g_conics[i, 0] += np.sum(dq * dx * dx)
        g_conics[i, 1] += np.sum(dq * 2.0 * dx * dy)
        g_conics[i, 2] += np.sum(dq * dy * dy)
        g_means[i, 0] += np.sum(dq * -2.0 * (a * dx + b * dy))
        g_means[i, 1] += np.sum(dq * -2.0 * (b * dx + c * dy))
    return g_means, g_conics, g_alphas, g_feats


def warp_ncc(src_gray, base, u_vec, v_vec, qx, qy, a, Sa, var_floor, w_eps):
    """Warp S reference patches into one source image and score them.

    Pixel ``q`` of patch ``s`` maps to ``base q - u_vec (v_vec[s] . q)`` in
    homogeneous source pixels.  ``a`` holds the mean-free reference patches
    and ``Sa`` their sums of squares.  Returns ``(1 - ncc, valid, g_v)``
    with ``g_v`` the partial of ``1 - ncc`` w.r.t. ``v_vec`` (zero rows
    where the sample is invalid).
    """
    h, w = src_gray.shape
    P = qx.shape[1]
    q_h = np.stack([qx, qy, np.ones_like(qx)], axis=-1)
    vq = np.matmul(q_h, v_vec[:, :, None])[..., 0]
    hq = q_h @ base.T - vq[..., None] * u_vec
    z = hq[..., 2]
    valid = np.all(z > w_eps, axis=1)
    z = np.where(z > w_eps, z, 1.0)
    u = hq[..., 0] / z
    v = hq[..., 1] / z
    valid &= np.all((u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1), axis=1)
    uc, vc = np.clip(u, 0, w - 1), np.clip(v, 0, h - 1)
    x0 = np.clip(np.floor(uc).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(vc).astype(np.int64), 0, h - 2)
    fx, fy = uc - x0, vc - y0
    i00, i01 = src_gray[y0, x0], src_gray[y0, x0 + 1]
    i10, i11 = src_gray[y0 + 1, x0], src_gray[y0 + 1, x0 + 1]
    b = (1 - fy) * ((1 - fx) * i00 + fx * i01) + fy * ((1 - fx) * i10 + fx * i11)
    bu = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
    bv = (1 - fx) * (i10 - i00) + fx * (i11 - i01)
    bc = b - b.mean(axis=1, keepdims=True)
    Sb = np.sum(bc * bc, axis=1)
    valid &= Sb / P >= var_floor
    Sb = np.where(valid, Sb, 1.0)
    denom = np.sqrt(Sa * Sb)
    nc = np.sum(a * bc, axis=1) / denom
    term = np.where(valid, 1.0 - nc, 0.0)
    g_b = -(a / denom[:, None] - nc[:, None] * bc / Sb[:, None])
    g_u, g_v = g_b * bu, g_b * bv
    g_h = np.stack([g_u / z, g_v / z, -(g_u * u + g_v * v) / z], axis=-1)
    gu = g_h @ u_vec
    g_vvec = -np.matmul(gu[:, None, :], q_h)[:, 0]
    g_vvec[~valid] = 0.0
    return term, valid, g_vvec

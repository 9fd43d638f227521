# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled front-to-back compositing kernels, plus the patch warp used by the NCC loss.

Same contract as ``_raster_py``; Gaussians are binned into 8x8 pixel tiles
in sorted order so each pixel only visits the ones whose reach box covers it.
Serial on purpose: per-Gaussian gradient sums must not depend on scheduling.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt
from libc.stdlib cimport free, malloc

cnp.import_array()

cdef int TILE = 8
cdef double ALPHA_MIN = 1.0 / 255.0
cdef double ALPHA_MAX = 0.99
cdef double T_STOP = 1e-4
DEF MAX_FEAT = 16
# q beyond 2 ln(255 alpha) means alpha * exp(-q / 2) < 1/255; the margin keeps
# the shortcut strictly on the safe side of rounding in exp()
cdef double Q_MARGIN = 1e-9


cdef double[::1] q_cutoffs(const double[::1] alphas):
    cdef Py_ssize_t m = alphas.shape[0], i
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(m):
        if alphas[i] * 255.0 > 0.0:
            out[i] = 2.0 * log(alphas[i] * 255.0) + Q_MARGIN
        else:
            out[i] = -1.0
    return out


cdef struct Splat:
    double mx, my, ca, cb, cc, alpha, qcut
    int x0, x1, y0, y1


cdef Splat* pack(const double[:, ::1] means2d, const double[:, ::1] conics, const double[::1] alphas,
                 const int[:, ::1] bbox) except NULL:
    """Copy the per-Gaussian inputs into one contiguous array for the pixel loops."""
    cdef Py_ssize_t m = alphas.shape[0], i
    cdef Splat* out = <Splat*>malloc(max(m, 1) * sizeof(Splat))
    if out == NULL:
        raise MemoryError()
    cdef double[::1] qcut = q_cutoffs(alphas)
    for i in range(m):
        out[i].mx = means2d[i, 0]
        out[i].my = means2d[i, 1]
        out[i].ca = conics[i, 0]
        out[i].cb = conics[i, 1]
        out[i].cc = conics[i, 2]
        out[i].alpha = alphas[i]
        out[i].qcut = qcut[i]
        out[i].x0 = bbox[i, 0]
        out[i].x1 = bbox[i, 1]
        out[i].y0 = bbox[i, 2]
        out[i].y1 = bbox[i, 3]
    return out


def bin_tiles(const int[:, ::1] bbox, int width, int height):
    cdef int tiles_x = (width + TILE - 1) // TILE
    cdef int tiles_y = (height + TILE - 1) // TILE
    cdef Py_ssize_t m = bbox.shape[0]
    cdef Py_ssize_t i
    cdef int tx, ty
    offsets_arr = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] offsets = offsets_arr
    for i in range(m):
        if bbox[i, 0] > bbox[i, 1] or bbox[i, 2] > bbox[i, 3]:
            continue
        for ty in range(bbox[i, 2] // TILE, bbox[i, 3] // TILE + 1):
            for tx in range(bbox[i, 0] // TILE, bbox[i, 1] // TILE + 1):
                offsets[ty * tiles_x + tx + 1] += 1
    for i in range(tiles_x * tiles_y):
        offsets[i + 1] += offsets[i]
    index_arr = np.empty(offsets[tiles_x * tiles_y], dtype=np.int32)
    cdef int[::1] index = index_arr
    cursor_arr = offsets_arr[:-1].copy()
    cdef cnp.int64_t[::1] cursor = cursor_arr
    cdef Py_ssize_t t
    for i in range(m):
        if bbox[i, 0] > bbox[i, 1] or bbox[i, 2] > bbox[i, 3]:
            continue
        for ty in range(bbox[i, 2] // TILE, bbox[i, 3] // TILE + 1):
            for tx in range(bbox[i, 0] // TILE, bbox[i, 1] // TILE + 1):
                t = ty * tiles_x + tx
                index[cursor[t]] = <int>i
                cursor[t] += 1
    return offsets_arr, index_arr


def forward(const double[:, ::1] means2d, const double[:, ::1] conics, const double[::1] alphas,
            const double[:, ::1] feats, const int[:, ::1] bbox, int width, int height):
    cdef Py_ssize_t n_feat = feats.shape[1]
    accum_arr = np.zeros((height, width, n_feat), dtype=np.float64)
    T_arr = np.ones((height, width), dtype=np.float64)
    last_arr = np.full((height, width), -1, dtype=np.int32)
    cdef double[:, :, ::1] accum = accum_arr
    cdef double[:, ::1] T_out = T_arr
    cdef int[:, ::1] last = last_arr
    offsets_arr, index_arr = bin_tiles(bbox, width, height)
    cdef cnp.int64_t[::1] offsets = offsets_arr
    cdef int[::1] index = index_arr
    cdef int tiles_x = (width + TILE - 1) // TILE
    cdef int tiles_y = (height + TILE - 1) // TILE
    if n_feat > MAX_FEAT:
        raise ValueError("too many feature channels")
    cdef double acc[MAX_FEAT]
    cdef int tx, ty, px, py, i, f, lst
    cdef cnp.int64_t k
    cdef double T, dx, dy, q, ah, w
    cdef Splat* sp = pack(means2d, conics, alphas, bbox)
    cdef Splat* g
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            for py in range(ty * TILE, min(height, (ty + 1) * TILE)):
                for px in range(tx * TILE, min(width, (tx + 1) * TILE)):
                    T = 1.0
                    lst = -1
                    for f in range(n_feat):
                        acc[f] = 0.0
                    for k in range(offsets[ty * tiles_x + tx], offsets[ty * tiles_x + tx + 1]):
                        i = index[k]
                        g = &sp[i]
                        if px < g.x0 or px > g.x1 or py < g.y0 or py > g.y1:
                            continue
                        dx = px - g.mx
                        dy = py - g.my
                        q = g.ca * dx * dx + 2.0 * g.cb * dx * dy + g.cc * dy * dy
                        if q > g.qcut:
                            continue
                        ah = g.alpha * exp(-0.5 * q)
                        if ah > ALPHA_MAX:
                            ah = ALPHA_MAX
                        if ah < ALPHA_MIN:
                            continue
                        w = ah * T
                        for f in range(n_feat):
                            acc[f] += w * feats[i, f]
                        T = T * (1.0 - ah)
                        lst = i
                        if T < T_STOP:
                            break
                    for f in range(n_feat):
                        accum[py, px, f] = acc[f]
                    T_out[py, px] = T
                    last[py, px] = lst
    free(sp)
    return accum_arr, T_arr, last_arr


def backward(const double[:, ::1] means2d, const double[:, ::1] conics, const double[::1] alphas,
             const double[:, ::1] feats, const int[:, ::1] bbox, int width, int height,
             const double[:, ::1] T_final, const int[:, ::1] last,
             const double[:, :, ::1] g_accum, const double[:, ::1] g_T):
    cdef Py_ssize_t m = feats.shape[0]
    cdef Py_ssize_t n_feat = feats.shape[1]
    g_means_arr = np.zeros((m, 2), dtype=np.float64)
    g_conics_arr = np.zeros((m, 3), dtype=np.float64)
    g_alphas_arr = np.zeros(m, dtype=np.float64)
    g_feats_arr = np.zeros((m, n_feat), dtype=np.float64)
    cdef double[:, ::1] g_means = g_means_arr
    cdef double[:, ::1] g_conics = g_conics_arr
    cdef double[::1] g_alphas = g_alphas_arr
    cdef double[:, ::1] g_feats = g_feats_arr
    offsets_arr, index_arr = bin_tiles(bbox, width, height)
    cdef cnp.int64_t[::1] offsets = offsets_arr
    cdef int[::1] index = index_arr
    cdef int tiles_x = (width + TILE - 1) // TILE
    cdef int tiles_y = (height + TILE - 1) // TILE
    if n_feat > MAX_FEAT:
        raise ValueError("too many feature channels")
    cdef double gacc[MAX_FEAT]
    cdef int tx, ty, px, py, i, f, lst
    cdef cnp.int64_t k, lo, hi, mid
    cdef double T, S, dx, dy, q, g, raw, ah, w, contrib, d_ah, dq, a, b, c
    cdef Splat* sp = pack(means2d, conics, alphas, bbox)
    cdef Splat* G
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            for py in range(ty * TILE, min(height, (ty + 1) * TILE)):
                for px in range(tx * TILE, min(width, (tx + 1) * TILE)):
                    lst = last[py, px]
                    if lst < 0:
                        continue
                    T = T_final[py, px]
                    S = g_T[py, px] * T
                    for f in range(n_feat):
                        gacc[f] = g_accum[py, px, f]
                    # tile lists are ascending, so jump straight to the last contributor
                    lo = offsets[ty * tiles_x + tx]
                    hi = offsets[ty * tiles_x + tx + 1]
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if index[mid] <= lst:
                            lo = mid + 1
                        else:
                            hi = mid
                    k = lo - 1
                    while k >= offsets[ty * tiles_x + tx]:
                        i = index[k]
                        k -= 1
                        G = &sp[i]
                        if px < G.x0 or px > G.x1 or py < G.y0 or py > G.y1:
                            continue
                        a = G.ca
                        b = G.cb
                        c = G.cc
                        dx = px - G.mx
                        dy = py - G.my
                        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                        if q > G.qcut:
                            continue
                        g = exp(-0.5 * q)
                        raw = G.alpha * g
                        ah = raw
                        if ah > ALPHA_MAX:
                            ah = ALPHA_MAX
                        if ah < ALPHA_MIN:
                            continue
                        T = T / (1.0 - ah)
                        w = ah * T
                        contrib = 0.0
                        for f in range(n_feat):
                            contrib += gacc[f] * feats[i, f]
                            g_feats[i, f] += gacc[f] * w
                        d_ah = T * contrib - S / (1.0 - ah)
                        S += w * contrib
                        if raw > ALPHA_MAX:
                            continue
                        g_alphas[i] += d_ah * g
                        dq = d_ah * (-0.5 * ah)
                        g_conics[i, 0] += dq * dx * dx
                        g_conics[i, 1] += dq * 2.0 * dx * dy
                        g_conics[i, 2] += dq * dy * dy
                        g_means[i, 0] += dq * -2.0 * (a * dx + b * dy)
                        g_means[i, 1] += dq * -2.0 * (b * dx + c * dy)
    free(sp)
    return g_means_arr, g_conics_arr, g_alphas_arr, g_feats_arr


def warp_ncc(const double[:, ::1] src_gray, const double[:, ::1] base, const double[::1] u_vec,
             const double[:, ::1] v_vec, const double[:, ::1] qx, const double[:, ::1] qy,
             const double[:, ::1] a, const double[::1] Sa, double var_floor, double w_eps):
    cdef Py_ssize_t S = qx.shape[0], P = qx.shape[1]
    cdef int h = src_gray.shape[0], w = src_gray.shape[1]
    term_arr = np.zeros(S, dtype=np.float64)
    valid_arr = np.zeros(S, dtype=np.bool_)
    gv_arr = np.zeros((S, 3), dtype=np.float64)
    cdef double[::1] term = term_arr
    cdef cnp.npy_bool[::1] valid = valid_arr
    cdef double[:, ::1] gv = gv_arr
    buf_arr = np.empty((6, P), dtype=np.float64)
    cdef double[:, ::1] buf = buf_arr  # b, bu, bv, u, v, z per patch pixel
    cdef Py_ssize_t s, j
    cdef int x0, y0
    cdef double x, y, vq, h0, h1, h2, uu, vv, fx, fy, i00, i01, i10, i11
    cdef double mean, Sb, cross, denom, nc, bc, gb, g_u, g_v, gh0, gh1, gh2, gu
    cdef bint ok
    for s in range(S):
        ok = True
        mean = 0.0
        for j in range(P):
            x = qx[s, j]
            y = qy[s, j]
            vq = v_vec[s, 0] * x + v_vec[s, 1] * y + v_vec[s, 2]
            h0 = base[0, 0] * x + base[0, 1] * y + base[0, 2] - u_vec[0] * vq
            h1 = base[1, 0] * x + base[1, 1] * y + base[1, 2] - u_vec[1] * vq
            h2 = base[2, 0] * x + base[2, 1] * y + base[2, 2] - u_vec[2] * vq
            if not h2 > w_eps:
                ok = False
                break
            uu = h0 / h2
            vv = h1 / h2
            if not (uu >= 0 and uu <= w - 1 and vv >= 0 and vv <= h - 1):
                ok = False
                break
            x0 = <int>uu
            y0 = <int>vv
            if x0 > w - 2:
                x0 = w - 2
            if y0 > h - 2:
                y0 = h - 2
            fx = uu - x0
            fy = vv - y0
            i00 = src_gray[y0, x0]
            i01 = src_gray[y0, x0 + 1]
            i10 = src_gray[y0 + 1, x0]
            i11 = src_gray[y0 + 1, x0 + 1]
            buf[0, j] = (1 - fy) * ((1 - fx) * i00 + fx * i01) + fy * ((1 - fx) * i10 + fx * i11)
            buf[1, j] = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
            buf[2, j] = (1 - fx) * (i10 - i00) + fx * (i11 - i01)
            buf[3, j] = uu
            buf[4, j] = vv
            buf[5, j] = h2
            mean += buf[0, j]
        if not ok:
            continue
        mean /= P
        Sb = 0.0
        cross = 0.0
        for j in range(P):
            bc = buf[0, j] - mean
            Sb += bc * bc
            cross += a[s, j] * bc
        if Sb / P < var_floor:
            continue
        denom = sqrt(Sa[s] * Sb)
        nc = cross / denom
        valid[s] = True
        term[s] = 1.0 - nc
        for j in range(P):
            bc = buf[0, j] - mean
            gb = -(a[s, j] / denom - nc * bc / Sb)
            g_u = gb * buf[1, j]
            g_v = gb * buf[2, j]
            gh0 = g_u / buf[5, j]
            gh1 = g_v / buf[5, j]
            gh2 = -(g_u * buf[3, j] + g_v * buf[4, j]) / buf[5, j]
            gu = gh0 * u_vec[0] + gh1 * u_vec[1] + gh2 * u_vec[2]
            gv[s, 0] -= gu * qx[s, j]
            gv[s, 1] -= gu * qy[s, j]
            gv[s, 2] -= gu
    return term_arr, valid_arr, gv_arr

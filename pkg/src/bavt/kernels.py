"""Inner loops: squared EDT line passes, CLAHE tile blending, segment rasterization.

Each kernel exists twice: a numba ``@njit`` loop version (``*_nb``) and a
vectorized pure-numpy version (``*_np``).  The unsuffixed names are bound at
import time according to :data:`bavt._accel.USE_NUMBA`.  Both versions must
agree exactly on integer outputs and to rounding on float outputs.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

#: Stand-in for +inf in integer squared-distance arithmetic.
EDT_INF = np.int64(1) << np.int64(40)


# --------------------------------------------------------------------------
# squared Euclidean distance transform, one axis at a time


@njit
def _envelope_1d(f, out, v, z):
    # Lower envelope of parabolas y = (q - site)^2 + f[site] over finite sites.
    n = f.shape[0]
    k = -1
    for q in range(n):
        if f[q] >= EDT_INF:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -1e300
            z[1] = 1e300
            continue
        fq = f[q] + q * q
        while True:
            p = v[k]
            s = (fq - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        if k == 0:
            z[0] = -1e300
        else:
            p = v[k - 1]
            z[k] = (fq - (f[p] + p * p)) / (2.0 * (q - p))
        z[k + 1] = 1e300
    if k < 0:
        for q in range(n):
            out[q] = EDT_INF
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        d = q - v[j]
        out[q] = d * d + f[v[j]]


@njit
def edt_sq_rows_nb(f):
    rows, n = f.shape
    out = np.empty_like(f)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    for r in range(rows):
        _envelope_1d(f[r], out[r], v, z)
    return out


def edt_sq_rows_np(f, chunk=32):
    """Exact per-row transform by direct minimisation, O(n^2) per row."""
    rows, n = f.shape
    idx = np.arange(n, dtype=np.int64)
    dist2 = (idx[:, None] - idx[None, :]) ** 2  # [query, site]
    out = np.empty_like(f)
    for start in range(0, rows, chunk):
        block = f[start:start + chunk]
        cand = block[:, None, :] + dist2[None, :, :]
        out[start:start + chunk] = cand.min(axis=2)
    return np.minimum(out, EDT_INF)


# --------------------------------------------------------------------------
# CLAHE: bilinear blending of per-tile lookup tables


@njit
def clahe_blend_nb(levels, maps, row_i0, row_i1, row_w, col_j0, col_j1, col_w):
    h, w = levels.shape
    out = np.empty((h, w), dtype=np.float64)
    for r in range(h):
        i0 = row_i0[r]
        i1 = row_i1[r]
        wy = row_w[r]
        for c in range(w):
            j0 = col_j0[c]
            j1 = col_j1[c]
            wx = col_w[c]
            lv = levels[r, c]
            top = (1.0 - wx) * maps[i0, j0, lv] + wx * maps[i0, j1, lv]
            bot = (1.0 - wx) * maps[i1, j0, lv] + wx * maps[i1, j1, lv]
            out[r, c] = (1.0 - wy) * top + wy * bot
    return out


def clahe_blend_np(levels, maps, row_i0, row_i1, row_w, col_j0, col_j1, col_w):
    i0 = row_i0[:, None]
    i1 = row_i1[:, None]
    wy = row_w[:, None]
    j0 = col_j0[None, :]
    j1 = col_j1[None, :]
    wx = col_w[None, :]
    top = (1.0 - wx) * maps[i0, j0, levels] + wx * maps[i0, j1, levels]
    bot = (1.0 - wx) * maps[i1, j0, levels] + wx * maps[i1, j1, levels]
    return (1.0 - wy) * top + wy * bot


# --------------------------------------------------------------------------
# thick line segment rasterization (pixel centre within half-width)


@njit
def rasterize_segment_nb(mask, r0, c0, r1, c1, half_width):
    h, w = mask.shape
    rmin = max(0, int(np.floor(min(r0, r1) - half_width)))
    rmax = min(h - 1, int(np.ceil(max(r0, r1) + half_width)))
    cmin = max(0, int(np.floor(min(c0, c1) - half_width)))
    cmax = min(w - 1, int(np.ceil(max(c0, c1) + half_width)))
    dr = r1 - r0
    dc = c1 - c0
    len2 = dr * dr + dc * dc
    hw2 = half_width * half_width
    for r in range(rmin, rmax + 1):
        for c in range(cmin, cmax + 1):
            if len2 > 0.0:
                t = ((r - r0) * dr + (c - c0) * dc) / len2
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            else:
                t = 0.0
            pr = r0 + t * dr - r
            pc = c0 + t * dc - c
            if pr * pr + pc * pc <= hw2:
                mask[r, c] = 1


def rasterize_segment_np(mask, r0, c0, r1, c1, half_width):
    h, w = mask.shape
    rmin = max(0, int(np.floor(min(r0, r1) - half_width)))
    rmax = min(h - 1, int(np.ceil(max(r0, r1) + half_width)))
    cmin = max(0, int(np.floor(min(c0, c1) - half_width)))
    cmax = min(w - 1, int(np.ceil(max(c0, c1) + half_width)))
    if rmin > rmax or cmin > cmax:
        return
    rr, cc = np.meshgrid(np.arange(rmin, rmax + 1, dtype=np.float64),
                         np.arange(cmin, cmax + 1, dtype=np.float64), indexing="ij")
    dr = r1 - r0
    dc = c1 - c0
    len2 = dr * dr + dc * dc
    if len2 > 0.0:
        t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / len2, 0.0, 1.0)
    else:
        t = np.zeros_like(rr)
    pr = r0 + t * dr - rr
    pc = c0 + t * dc - cc
    hit = pr * pr + pc * pc <= half_width * half_width
    mask[rmin:rmax + 1, cmin:cmax + 1][hit] = 1


if USE_NUMBA:
    edt_sq_rows = edt_sq_rows_nb
    clahe_blend = clahe_blend_nb
    rasterize_segment = rasterize_segment_nb
else:
    edt_sq_rows = edt_sq_rows_np
    clahe_blend = clahe_blend_np
    rasterize_segment = rasterize_segment_np

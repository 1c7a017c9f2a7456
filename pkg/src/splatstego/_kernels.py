"""Compiled tile kernels for the compositing sweep (numba, optional).

Each kernel processes one tile: splats arrive in global depth order and the
per-pixel arithmetic matches the numpy fallback in rasterizer.py operation
for operation, so both paths produce bit-identical images. Kernels release
the GIL so tiles can run on a thread pool; buffers are per-tile, and the
caller reduces per-splat outputs in fixed tile order.
"""

from __future__ import annotations

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap


@njit(cache=True, nogil=True)
def composite_tile(hit, bboxes, g_off, g_data, alphas, colors,
                   ty, ty1, tx, tx1, term, dmax, T, img, wsum, v_part):
    for mi in range(hit.shape[0]):
        m = hit[mi]
        x0 = bboxes[m, 0]
        x1 = bboxes[m, 1]
        y0 = bboxes[m, 2]
        gx0 = x0 if x0 > tx else tx
        gx1 = x1 if x1 < tx1 else tx1
        gy0 = y0 if y0 > ty else ty
        y1 = bboxes[m, 3]
        gy1 = y1 if y1 < ty1 else ty1
        a = alphas[m]
        c0 = colors[m, 0]
        c1 = colors[m, 1]
        c2 = colors[m, 2]
        row = x1 - x0
        base0 = g_off[m]
        vs = 0.0
        for py in range(gy0, gy1):
            base = base0 + (py - y0) * row - x0
            iy = py - ty
            for px in range(gx0, gx1):
                ix = px - tx
                t = T[iy, ix]
                if t < term:
                    continue
                d = a * g_data[base + px]
                if d > dmax:
                    d = dmax
                w = d * t
                img[iy, ix, 0] += w * c0
                img[iy, ix, 1] += w * c1
                img[iy, ix, 2] += w * c2
                wsum[iy, ix] += w
                vs += w
                T[iy, ix] = t * (1.0 - d)
        v_part[m] = vs


@njit(cache=True, nogil=True)
def backward_tile(hit, bboxes, g_off, g_data, alphas, colors, C, U,
                  ty, ty1, tx, tx1, term, dmax, T, P, d_alpha, d_color):
    for mi in range(hit.shape[0]):
        m = hit[mi]
        x0 = bboxes[m, 0]
        x1 = bboxes[m, 1]
        y0 = bboxes[m, 2]
        gx0 = x0 if x0 > tx else tx
        gx1 = x1 if x1 < tx1 else tx1
        gy0 = y0 if y0 > ty else ty
        y1 = bboxes[m, 3]
        gy1 = y1 if y1 < ty1 else ty1
        a = alphas[m]
        c0 = colors[m, 0]
        c1 = colors[m, 1]
        c2 = colors[m, 2]
        row = x1 - x0
        base0 = g_off[m]
        da = 0.0
        dc0 = 0.0
        dc1 = 0.0
        dc2 = 0.0
        for py in range(gy0, gy1):
            base = base0 + (py - y0) * row - x0
            iy = py - ty
            for px in range(gx0, gx1):
                ix = px - tx
                t = T[iy, ix]
                if t < term:
                    continue
                g = g_data[base + px]
                ag = a * g
                d = ag if ag < dmax else dmax
                w = d * t
                p0 = P[iy, ix, 0] + w * c0
                p1 = P[iy, ix, 1] + w * c1
                p2 = P[iy, ix, 2] + w * c2
                P[iy, ix, 0] = p0
                P[iy, ix, 1] = p1
                P[iy, ix, 2] = p2
                u0 = U[iy, ix, 0]
                u1 = U[iy, ix, 1]
                u2 = U[iy, ix, 2]
                dc0 += u0 * w
                dc1 += u1 * w
                dc2 += u2 * w
                denom = 1.0 - d
                gd = (u0 * (c0 * t - (C[iy, ix, 0] - p0) / denom)
                      + u1 * (c1 * t - (C[iy, ix, 1] - p1) / denom)
                      + u2 * (c2 * t - (C[iy, ix, 2] - p2) / denom))
                if ag < dmax:
                    da += gd * g
                T[iy, ix] = t * denom
        d_alpha[m] = da
        d_color[m, 0] = dc0
        d_color[m, 1] = dc1
        d_color[m, 2] = dc2

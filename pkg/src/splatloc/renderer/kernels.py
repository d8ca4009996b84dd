"""Numba tile kernels. Every kernel processes a half-open range of tiles and
writes only to buffers owned by those tiles, so tile ranges can run on any
number of threads with bit-identical results."""

import numpy as np
from numba import njit


@njit(cache=True)
def bin_gaussians(order, rect, tiles_x, tiles_y):
    """Tile-major lists of Gaussian ids, each list in the given global depth order.

    ``rect`` holds per-Gaussian inclusive tile bounds (x0, y0, x1, y1).
    Returns ``(offsets, ids)`` with tile ``t`` owning ``ids[offsets[t]:offsets[t+1]]``.
    """
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in order:
        for ty in range(rect[g, 1], rect[g, 3] + 1):
            for tx in range(rect[g, 0], rect[g, 2] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for g in order:
        for ty in range(rect[g, 1], rect[g, 3] + 1):
            for tx in range(rect[g, 0], rect[g, 2] + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@njit(inline="always")
def _alpha(g, px, py, mean2d, conic, opac, cutoff):
    """Returns (alpha, d alpha / d power, dx, dy); alpha == 0 means no contribution."""
    dx = px - mean2d[g, 0]
    dy = py - mean2d[g, 1]
    a = conic[g, 0]
    b = conic[g, 1]
    c = conic[g, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    if power > 0.0:
        return 0.0, 0.0, dx, dy
    gval = np.exp(power)
    raw = opac[g] * gval
    draw = raw  # d raw / d power
    if raw > 0.99:
        raw = 0.99
        draw = 0.0
    if raw < cutoff:
        return 0.0, 0.0, dx, dy
    # quintic fade over [cutoff, 2 cutoff] keeps alpha C2 in the pose
    x = (raw - cutoff) / cutoff
    if x < 1.0:
        s = x * x * x * (x * (6.0 * x - 15.0) + 10.0)
        ds = 30.0 * x * x * (x - 1.0) * (x - 1.0) / cutoff
        return raw * s, (s + raw * ds) * draw, dx, dy
    return raw, draw, dx, dy


@njit(nogil=True, cache=True)
def forward_tiles(t_begin, t_end, tiles_x, tile, width, height, offsets, ids,
                  mean2d, conic, opac, color, depth, bg, cutoff, t_floor, max_per_pixel,
                  out_rgb, out_depth, out_alpha, out_last):
    for t in range(t_begin, t_end):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                r = 0.0
                gch = 0.0
                bch = 0.0
                dsum = 0.0
                n_used = 0
                k = start
                while k < end:
                    g = ids[k]
                    al, _, _, _ = _alpha(g, float(px), float(py), mean2d, conic, opac, cutoff)
                    if al == 0.0:
                        k += 1
                        continue
                    test_t = T * (1.0 - al)
                    if test_t < t_floor:
                        break
                    w = al * T
                    r += w * color[g, 0]
                    gch += w * color[g, 1]
                    bch += w * color[g, 2]
                    dsum += w * depth[g]
                    T = test_t
                    n_used += 1
                    k += 1
                    if n_used >= max_per_pixel:
                        break
                out_rgb[py, px, 0] = r + T * bg[0]
                out_rgb[py, px, 1] = gch + T * bg[1]
                out_rgb[py, px, 2] = bch + T * bg[2]
                a = 1.0 - T
                out_alpha[py, px] = a
                out_depth[py, px] = dsum / max(a, 1e-6) if a > 0.0 else 0.0
                out_last[py, px] = k


@njit(nogil=True, cache=True)
def backward_tiles(t_begin, t_end, tiles_x, tile, width, height, offsets, ids,
                   mean2d, conic, opac, color, cutoff, last, rgb, weight, pair_grad):
    """Per (tile, list entry) gradients of the loss w.r.t. 2D mean and conic.

    ``pair_grad[k] = (d/dmx, d/dmy, d/da, d/db, d/dc, d/dopacity)`` for list entry ``k``.
    """
    for t in range(t_begin, t_end):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        for k in range(start, offsets[t + 1]):
            for j in range(6):
                pair_grad[k, j] = 0.0
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                w0 = weight[py, px, 0]
                w1 = weight[py, px, 1]
                w2 = weight[py, px, 2]
                if w0 == 0.0 and w1 == 0.0 and w2 == 0.0:
                    continue
                c0 = rgb[py, px, 0]
                c1 = rgb[py, px, 1]
                c2 = rgb[py, px, 2]
                T = 1.0
                f0 = 0.0
                f1 = 0.0
                f2 = 0.0
                for k in range(start, last[py, px]):
                    g = ids[k]
                    al, dal, dx, dy = _alpha(g, float(px), float(py), mean2d, conic, opac, cutoff)
                    if al == 0.0:
                        continue
                    wgt = al * T
                    f0 += wgt * color[g, 0]
                    f1 += wgt * color[g, 1]
                    f2 += wgt * color[g, 2]
                    inv = 1.0 / (1.0 - al)
                    # d rgb / d alpha_i = T_i c_i - (everything behind i) / (1 - alpha_i)
                    dl_da = (w0 * (T * color[g, 0] - (c0 - f0) * inv)
                             + w1 * (T * color[g, 1] - (c1 - f1) * inv)
                             + w2 * (T * color[g, 2] - (c2 - f2) * inv))
                    T = T * (1.0 - al)
                    gp = dl_da * dal
                    if gp == 0.0:
                        continue
                    a = conic[g, 0]
                    b = conic[g, 1]
                    c = conic[g, 2]
                    pair_grad[k, 0] += gp * (a * dx + b * dy)
                    pair_grad[k, 1] += gp * (b * dx + c * dy)
                    pair_grad[k, 2] += gp * (-0.5 * dx * dx)
                    pair_grad[k, 3] += gp * (-dx * dy)
                    pair_grad[k, 4] += gp * (-0.5 * dy * dy)
                    # alpha = opacity * G, so d alpha / d opacity = (d alpha / d power) / opacity
                    pair_grad[k, 5] += gp / opac[g]


@njit(cache=True)
def reduce_pairs(ids, pair_grad, n_gaussians):
    """Sum list-entry gradients per Gaussian in fixed list order."""
    out = np.zeros((n_gaussians, 6))
    for k in range(ids.shape[0]):
        g = ids[k]
        for j in range(6):
            out[g, j] += pair_grad[k, j]
    return out

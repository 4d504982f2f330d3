"""Numba kernels for tiled forward/backward splatting.

Layout of the pair arrays: each (tile, gaussian) pair owns one row, pairs are
sorted by tile with front-to-back depth order inside a tile. Parallelism is
over tiles; every write target (image pixels, per-pair gradient rows) belongs
to exactly one tile, so results are bitwise identical for any thread count.
fastmath stays off: reassociation would break that guarantee.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

# Kernels never composite alpha above this, keeping 1/(1-alpha) finite in the
# backward pass. The naive oracle applies the same ceiling.
ALPHA_CEILING = 1.0 - 1e-7


@njit(cache=True, parallel=True, fastmath=False)
def forward_kernel(
    pair_g,
    tile_start,
    tile_end,
    mean2d,
    conic,
    opac,
    color,
    cut_log,
    background,
    early_stop,
    tiles_x,
    tile_size,
    height,
    width,
    img,
    transmittance,
    contrib,
):
    n_tiles = tile_start.shape[0]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        for py in range(y0, min(y0 + tile_size, height)):
            for px in range(x0, min(x0 + tile_size, width)):
                qx = px + 0.5
                qy = py + 0.5
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                count = 0
                for k in range(tile_start[t], tile_end[t]):
                    if trans < early_stop:
                        break
                    gi = pair_g[k]
                    dx = qx - mean2d[gi, 0]
                    dy = qy - mean2d[gi, 1]
                    power = (
                        0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy)
                        + conic[gi, 1] * dx * dy
                    )
                    if power < 0.0 or power > cut_log[gi]:
                        continue
                    alpha = opac[gi] * math.exp(-power)
                    if alpha > ALPHA_CEILING:
                        alpha = ALPHA_CEILING
                    w = alpha * trans
                    r += w * color[gi, 0]
                    g += w * color[gi, 1]
                    b += w * color[gi, 2]
                    trans *= 1.0 - alpha
                    count += 1
                img[py, px, 0] = r + trans * background[0]
                img[py, px, 1] = g + trans * background[1]
                img[py, px, 2] = b + trans * background[2]
                transmittance[py, px] = trans
                contrib[py, px] = count


@njit(cache=True, parallel=True, fastmath=False)
def backward_kernel(
    pair_g,
    tile_start,
    tile_end,
    mean2d,
    conic,
    opac,
    color,
    cut_log,
    early_stop,
    tiles_x,
    tile_size,
    height,
    width,
    residual,
    img,
    pair_grad,
):
    """Accumulate per-pair gradients of <residual, image>.

    pair_grad columns: dmean_x, dmean_y, dA, dB, dC, dopacity, dr, dg, db
    where (A, B, C) parameterize the conic. Mirrors the forward traversal
    exactly, recomputing transmittance front to back.
    """
    n_tiles = tile_start.shape[0]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        for py in range(y0, min(y0 + tile_size, height)):
            for px in range(x0, min(x0 + tile_size, width)):
                qx = px + 0.5
                qy = py + 0.5
                res0 = residual[py, px, 0]
                res1 = residual[py, px, 1]
                res2 = residual[py, px, 2]
                tot0 = img[py, px, 0]
                tot1 = img[py, px, 1]
                tot2 = img[py, px, 2]
                trans = 1.0
                pre0 = 0.0  # prefix sums of composited color incl. current term
                pre1 = 0.0
                pre2 = 0.0
                for k in range(tile_start[t], tile_end[t]):
                    if trans < early_stop:
                        break
                    gi = pair_g[k]
                    dx = qx - mean2d[gi, 0]
                    dy = qy - mean2d[gi, 1]
                    power = (
                        0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy)
                        + conic[gi, 1] * dx * dy
                    )
                    if power < 0.0 or power > cut_log[gi]:
                        continue
                    gval = math.exp(-power)
                    alpha = opac[gi] * gval
                    if alpha > ALPHA_CEILING:
                        alpha = ALPHA_CEILING
                    w = alpha * trans
                    c0 = color[gi, 0]
                    c1 = color[gi, 1]
                    c2 = color[gi, 2]
                    pre0 += w * c0
                    pre1 += w * c1
                    pre2 += w * c2
                    one_m = 1.0 - alpha
                    # d<res, C>/dalpha': behind-light is everything not yet composited
                    d_alpha = (
                        res0 * (c0 * trans - (tot0 - pre0) / one_m)
                        + res1 * (c1 * trans - (tot1 - pre1) / one_m)
                        + res2 * (c2 * trans - (tot2 - pre2) / one_m)
                    )
                    pair_grad[k, 6] += res0 * w
                    pair_grad[k, 7] += res1 * w
                    pair_grad[k, 8] += res2 * w
                    pair_grad[k, 5] += d_alpha * gval
                    d_power = -alpha * d_alpha
                    gx = d_power * (conic[gi, 0] * dx + conic[gi, 1] * dy)
                    gy = d_power * (conic[gi, 2] * dy + conic[gi, 1] * dx)
                    pair_grad[k, 0] -= gx
                    pair_grad[k, 1] -= gy
                    pair_grad[k, 2] += d_power * 0.5 * dx * dx
                    pair_grad[k, 3] += d_power * dx * dy
                    pair_grad[k, 4] += d_power * 0.5 * dy * dy
                    trans = trans * one_m

"""Compiled tile rasterization kernels.

Scalar per-pixel loops compiled with numba, parallelized over tiles.
The math mirrors ``_numpy_kernels`` exactly: same branch conditions,
same accumulation order per pixel, same gradient record layout.  Tiles
own disjoint pixel blocks and disjoint gradient rows, so the parallel
loop is race-free and deterministic.
"""

import math

import numba
import numpy as np

from .common import CUTOFF, DIV_GUARD, GRAD_COLS, PARALLEL_EPS, SIGMA_SCR, TILE, TMIN


@numba.njit(cache=True, parallel=True)
def forward(tile_starts, tile_entries, tiles_x, tiles_y, width, height,
            fx, fy, cx, cy, c, a, b, nrm, s, alpha, color, orient, px, py,
            out_color, out_alpha, out_dsum, out_normal):
    n_tiles = tiles_x * tiles_y
    for tid in numba.prange(n_tiles):
        start = tile_starts[tid]
        end = tile_starts[tid + 1]
        if start == end:
            continue
        ty = tid // tiles_x
        tx = tid % tiles_x
        y0 = ty * TILE
        x0 = tx * TILE
        y1 = min(y0 + TILE, height)
        x1 = min(x0 + TILE, width)
        for yy in range(y0, y1):
            dir_y = (yy - cy) / fy
            for xx in range(x0, x1):
                dir_x = (xx - cx) / fx
                T = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_a = 0.0
                acc_d = 0.0
                acc_nx = 0.0
                acc_ny = 0.0
                acc_nz = 0.0
                for e in range(start, end):
                    if T < TMIN:
                        break
                    i = tile_entries[e]
                    nd = nrm[i, 0] * dir_x + nrm[i, 1] * dir_y + nrm[i, 2]
                    nu = (nrm[i, 0] * c[i, 0] + nrm[i, 1] * c[i, 1]
                          + nrm[i, 2] * c[i, 2])
                    hit = abs(nd) >= PARALLEL_EPS
                    t_hit = 0.0
                    g_obj = 0.0
                    u = 0.0
                    v = 0.0
                    if hit:
                        t_hit = nu / nd
                        if t_hit > 0.0:
                            relx = t_hit * dir_x - c[i, 0]
                            rely = t_hit * dir_y - c[i, 1]
                            relz = t_hit - c[i, 2]
                            u = (relx * a[i, 0] + rely * a[i, 1]
                                 + relz * a[i, 2]) / (s[i, 0] * s[i, 0])
                            v = (relx * b[i, 0] + rely * b[i, 1]
                                 + relz * b[i, 2]) / (s[i, 1] * s[i, 1])
                            g_obj = math.exp(-0.5 * (u * u + v * v))
                        else:
                            hit = False
                    dx = xx - px[i]
                    dy = yy - py[i]
                    g_scr = math.exp(-0.5 * (dx * dx + dy * dy)
                                     / (SIGMA_SCR * SIGMA_SCR))
                    g_hat = max(g_obj, g_scr)
                    if g_hat < CUTOFF:
                        continue
                    w = alpha[i] * g_hat
                    if hit:
                        d_hit = t_hit
                    else:
                        d_hit = c[i, 2]
                    contrib = w * T
                    acc_r += contrib * color[i, 0]
                    acc_g += contrib * color[i, 1]
                    acc_b += contrib * color[i, 2]
                    acc_a += contrib
                    acc_d += contrib * d_hit
                    acc_nx += contrib * orient[i] * nrm[i, 0]
                    acc_ny += contrib * orient[i] * nrm[i, 1]
                    acc_nz += contrib * orient[i] * nrm[i, 2]
                    T = T * (1.0 - w)
                out_color[yy, xx, 0] = acc_r
                out_color[yy, xx, 1] = acc_g
                out_color[yy, xx, 2] = acc_b
                out_alpha[yy, xx] = acc_a
                out_dsum[yy, xx] = acc_d
                out_normal[yy, xx, 0] = acc_nx
                out_normal[yy, xx, 1] = acc_ny
                out_normal[yy, xx, 2] = acc_nz


@numba.njit(cache=True, parallel=True)
def backward(tile_starts, tile_entries, tiles_x, tiles_y, width, height,
             fx, fy, cx, cy, c, a, b, nrm, s, alpha, color, orient, px, py,
             u_color, u_alpha, u_dsum, u_normal, g_ent):
    inv_s2 = 1.0 / (SIGMA_SCR * SIGMA_SCR)
    n_tiles = tiles_x * tiles_y
    for tid in numba.prange(n_tiles):
        start = tile_starts[tid]
        end = tile_starts[tid + 1]
        if start == end:
            continue
        ty = tid // tiles_x
        tx = tid % tiles_x
        y0 = ty * TILE
        x0 = tx * TILE
        y1 = min(y0 + TILE, height)
        x1 = min(x0 + TILE, width)
        for yy in range(y0, y1):
            dir_y = (yy - cy) / fy
            for xx in range(x0, x1):
                dir_x = (xx - cx) / fx
                ucr = u_color[yy, xx, 0]
                ucg = u_color[yy, xx, 1]
                ucb = u_color[yy, xx, 2]
                ua = u_alpha[yy, xx]
                ud = u_dsum[yy, xx]
                unx = u_normal[yy, xx, 0]
                uny = u_normal[yy, xx, 1]
                unz = u_normal[yy, xx, 2]

                # Pass 1: total per-pixel contribution.
                T = 1.0
                phi_total = 0.0
                for e in range(start, end):
                    if T < TMIN:
                        break
                    i = tile_entries[e]
                    nd = nrm[i, 0] * dir_x + nrm[i, 1] * dir_y + nrm[i, 2]
                    nu = (nrm[i, 0] * c[i, 0] + nrm[i, 1] * c[i, 1]
                          + nrm[i, 2] * c[i, 2])
                    hit = abs(nd) >= PARALLEL_EPS
                    t_hit = 0.0
                    g_obj = 0.0
                    if hit:
                        t_hit = nu / nd
                        if t_hit > 0.0:
                            relx = t_hit * dir_x - c[i, 0]
                            rely = t_hit * dir_y - c[i, 1]
                            relz = t_hit - c[i, 2]
                            u = (relx * a[i, 0] + rely * a[i, 1]
                                 + relz * a[i, 2]) / (s[i, 0] * s[i, 0])
                            v = (relx * b[i, 0] + rely * b[i, 1]
                                 + relz * b[i, 2]) / (s[i, 1] * s[i, 1])
                            g_obj = math.exp(-0.5 * (u * u + v * v))
                        else:
                            hit = False
                    dx = xx - px[i]
                    dy = yy - py[i]
                    g_scr = math.exp(-0.5 * (dx * dx + dy * dy)
                                     / (SIGMA_SCR * SIGMA_SCR))
                    g_hat = max(g_obj, g_scr)
                    if g_hat < CUTOFF:
                        continue
                    w = alpha[i] * g_hat
                    if hit:
                        d_hit = t_hit
                    else:
                        d_hit = c[i, 2]
                    phi = (ucr * color[i, 0] + ucg * color[i, 1]
                           + ucb * color[i, 2] + ua + ud * d_hit
                           + orient[i] * (unx * nrm[i, 0] + uny * nrm[i, 1]
                                          + unz * nrm[i, 2]))
                    phi_total += w * T * phi
                    T = T * (1.0 - w)

                # Pass 2: per-entry gradients via suffix sums.
                T = 1.0
                prefix = 0.0
                for e in range(start, end):
                    if T < TMIN:
                        break
                    i = tile_entries[e]
                    nd = nrm[i, 0] * dir_x + nrm[i, 1] * dir_y + nrm[i, 2]
                    nu = (nrm[i, 0] * c[i, 0] + nrm[i, 1] * c[i, 1]
                          + nrm[i, 2] * c[i, 2])
                    hit = abs(nd) >= PARALLEL_EPS
                    t_hit = 0.0
                    g_obj = 0.0
                    u = 0.0
                    v = 0.0
                    relx = 0.0
                    rely = 0.0
                    relz = 0.0
                    if hit:
                        t_hit = nu / nd
                        if t_hit > 0.0:
                            relx = t_hit * dir_x - c[i, 0]
                            rely = t_hit * dir_y - c[i, 1]
                            relz = t_hit - c[i, 2]
                            u = (relx * a[i, 0] + rely * a[i, 1]
                                 + relz * a[i, 2]) / (s[i, 0] * s[i, 0])
                            v = (relx * b[i, 0] + rely * b[i, 1]
                                 + relz * b[i, 2]) / (s[i, 1] * s[i, 1])
                            g_obj = math.exp(-0.5 * (u * u + v * v))
                        else:
                            hit = False
                    dx = xx - px[i]
                    dy = yy - py[i]
                    g_scr = math.exp(-0.5 * (dx * dx + dy * dy)
                                     / (SIGMA_SCR * SIGMA_SCR))
                    g_hat = max(g_obj, g_scr)
                    if g_hat < CUTOFF:
                        continue
                    w = alpha[i] * g_hat
                    if hit:
                        d_hit = t_hit
                    else:
                        d_hit = c[i, 2]
                    phi = (ucr * color[i, 0] + ucg * color[i, 1]
                           + ucb * color[i, 2] + ua + ud * d_hit
                           + orient[i] * (unx * nrm[i, 0] + uny * nrm[i, 1]
                                          + unz * nrm[i, 2]))
                    contrib = w * T
                    prefix += contrib * phi
                    suffix = phi_total - prefix
                    denom = 1.0 - w
                    if denom < DIV_GUARD:
                        denom = DIV_GUARD
                    gw = T * phi - suffix / denom
                    g_ghat = alpha[i] * gw
                    g_ent[e, 14] += g_hat * gw

                    g_ent[e, 15] += contrib * ucr
                    g_ent[e, 16] += contrib * ucg
                    g_ent[e, 17] += contrib * ucb
                    g_ent[e, 9] += contrib * orient[i] * unx
                    g_ent[e, 10] += contrib * orient[i] * uny
                    g_ent[e, 11] += contrib * orient[i] * unz
                    gd = contrib * ud

                    obj = hit and (g_obj >= g_scr)
                    if obj:
                        g_gobj = g_ghat * g_obj
                        gu = -u * g_gobj
                        gv = -v * g_gobj
                        inv_su2 = 1.0 / (s[i, 0] * s[i, 0])
                        inv_sv2 = 1.0 / (s[i, 1] * s[i, 1])
                        da = (dir_x * a[i, 0] + dir_y * a[i, 1]
                              + a[i, 2]) * inv_su2
                        db = (dir_x * b[i, 0] + dir_y * b[i, 1]
                              + b[i, 2]) * inv_sv2
                        gt = gu * da + gv * db + gd
                        gt_nd = gt / nd
                        g_ent[e, 0] += (gt_nd * nrm[i, 0] - gu * a[i, 0] * inv_su2
                                        - gv * b[i, 0] * inv_sv2)
                        g_ent[e, 1] += (gt_nd * nrm[i, 1] - gu * a[i, 1] * inv_su2
                                        - gv * b[i, 1] * inv_sv2)
                        g_ent[e, 2] += (gt_nd * nrm[i, 2] - gu * a[i, 2] * inv_su2
                                        - gv * b[i, 2] * inv_sv2)
                        g_ent[e, 3] += gu * relx * inv_su2
                        g_ent[e, 4] += gu * rely * inv_su2
                        g_ent[e, 5] += gu * relz * inv_su2
                        g_ent[e, 6] += gv * relx * inv_sv2
                        g_ent[e, 7] += gv * rely * inv_sv2
                        g_ent[e, 8] += gv * relz * inv_sv2
                        g_ent[e, 9] += -gt_nd * relx
                        g_ent[e, 10] += -gt_nd * rely
                        g_ent[e, 11] += -gt_nd * relz
                        g_ent[e, 12] += -2.0 * gu * u / s[i, 0]
                        g_ent[e, 13] += -2.0 * gv * v / s[i, 1]
                    else:
                        g_gscr = g_ghat * g_scr
                        g_ent[e, 18] += g_gscr * dx * inv_s2
                        g_ent[e, 19] += g_gscr * dy * inv_s2
                        if hit:
                            gt_nd = gd / nd
                            g_ent[e, 0] += gt_nd * nrm[i, 0]
                            g_ent[e, 1] += gt_nd * nrm[i, 1]
                            g_ent[e, 2] += gt_nd * nrm[i, 2]
                            g_ent[e, 9] += -gt_nd * relx
                            g_ent[e, 10] += -gt_nd * rely
                            g_ent[e, 11] += -gt_nd * relz
                        else:
                            g_ent[e, 2] += gd

                    T = T * (1.0 - w)

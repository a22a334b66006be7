"""Pure-numpy tile rasterization kernels.

These kernels are the reference implementation of the per-pixel blending
loop.  Each tile processes its depth-sorted entry list sequentially while
staying vectorized over the tile's pixel block; per-pixel accumulation
order is therefore identical to the scalar compiled kernels, and the two
backends produce the same images.

Entry data layout (one row per splat, camera frame):
    c      (N, 3) splat centers
    a, b   (N, 3) scaled tangent axes (columns of RS)
    nrm    (N, 3) unit normals
    s      (N, 2) scales along the two tangent axes
    alpha  (N,)   opacities
    color  (N, 3) per-splat RGB (view-dependent color already evaluated)
    orient (N,)   +-1 sign flipping the normal toward the camera
    px, py (N,)   projected center in pixel coordinates

Per-entry gradient record layout (GRAD_COLS columns):
    0:3  d/dc    3:6  d/da    6:9  d/db    9:12 d/dnrm
    12:14 d/ds   14 d/dalpha  15:18 d/dcolor  18 d/dpx  19 d/dpy
"""

import numpy as np

from .common import CUTOFF, DIV_GUARD, PARALLEL_EPS, SIGMA_SCR, TILE, TMIN


def _tile_pixels(ty, tx, width, height, cx, cy, fx, fy):
    """Pixel coordinates and z-normalized ray directions for one tile."""
    x0 = tx * TILE
    y0 = ty * TILE
    xs = np.arange(x0, min(x0 + TILE, width), dtype=np.float64)
    ys = np.arange(y0, min(y0 + TILE, height), dtype=np.float64)
    pix_x = np.repeat(xs[None, :], ys.shape[0], axis=0).ravel()
    pix_y = np.repeat(ys[:, None], xs.shape[0], axis=1).ravel()
    dir_x = (pix_x - cx) / fx
    dir_y = (pix_y - cy) / fy
    return x0, y0, xs.shape[0], ys.shape[0], pix_x, pix_y, dir_x, dir_y


def _entry_response(c, a, b, nrm, s, pix_x, pix_y, dir_x, dir_y, px, py):
    """Evaluate one splat against a block of rays.

    Returns (hit, t_hit, u, v, g_obj, g_scr, nd, relx, rely, relz) where
    ``hit`` marks rays with a valid forward-facing plane intersection.
    Misses keep the screen-space Gaussian response so that nearly
    edge-on splats stay visible through the low-pass term.
    """
    nd = nrm[0] * dir_x + nrm[1] * dir_y + nrm[2]
    valid = np.abs(nd) >= PARALLEL_EPS
    safe_nd = np.where(valid, nd, 1.0)
    nu = nrm[0] * c[0] + nrm[1] * c[1] + nrm[2] * c[2]
    t_hit = nu / safe_nd
    hit = valid & (t_hit > 0.0)
    relx = t_hit * dir_x - c[0]
    rely = t_hit * dir_y - c[1]
    relz = t_hit - c[2]
    u = (relx * a[0] + rely * a[1] + relz * a[2]) / (s[0] * s[0])
    v = (relx * b[0] + rely * b[1] + relz * b[2]) / (s[1] * s[1])
    g_obj = np.where(hit, np.exp(-0.5 * (u * u + v * v)), 0.0)
    dx = pix_x - px
    dy = pix_y - py
    g_scr = np.exp(-0.5 * (dx * dx + dy * dy) / (SIGMA_SCR * SIGMA_SCR))
    return hit, t_hit, u, v, g_obj, g_scr, safe_nd, relx, rely, relz, dx, dy


def forward(tile_starts, tile_entries, tiles_x, tiles_y, width, height,
            fx, fy, cx, cy, c, a, b, nrm, s, alpha, color, orient, px, py,
            out_color, out_alpha, out_dsum, out_normal):
    """Rasterize depth-sorted entries into the output buffers.

    ``tile_starts`` has ``tiles_x * tiles_y + 1`` offsets into
    ``tile_entries``; entries for each tile are sorted front to back.
    Outputs are accumulated in place: premultiplied color, alpha,
    weighted depth sum and weighted camera-frame normal sum.
    """
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            start = tile_starts[tid]
            end = tile_starts[tid + 1]
            if start == end:
                continue
            (x0, y0, nx, ny, pix_x, pix_y,
             dir_x, dir_y) = _tile_pixels(ty, tx, width, height,
                                          cx, cy, fx, fy)
            npix = pix_x.shape[0]
            T = np.ones(npix)
            acc_c = np.zeros((npix, 3))
            acc_a = np.zeros(npix)
            acc_d = np.zeros(npix)
            acc_n = np.zeros((npix, 3))
            for e in range(start, end):
                i = tile_entries[e]
                (hit, t_hit, u, v, g_obj, g_scr, _nd,
                 _rx, _ry, _rz, _dx, _dy) = _entry_response(
                    c[i], a[i], b[i], nrm[i], s[i],
                    pix_x, pix_y, dir_x, dir_y, px[i], py[i])
                g_hat = np.maximum(g_obj, g_scr)
                live = (T >= TMIN) & (g_hat >= CUTOFF)
                w = np.where(live, alpha[i] * g_hat, 0.0)
                d_hit = np.where(hit, t_hit, c[i, 2])
                contrib = w * T
                acc_c += contrib[:, None] * color[i]
                acc_a += contrib
                acc_d += contrib * d_hit
                acc_n += (contrib * orient[i])[:, None] * nrm[i]
                T = T * (1.0 - w)
            sl = (slice(y0, y0 + ny), slice(x0, x0 + nx))
            out_color[sl] = acc_c.reshape(ny, nx, 3)
            out_alpha[sl] = acc_a.reshape(ny, nx)
            out_dsum[sl] = acc_d.reshape(ny, nx)
            out_normal[sl] = acc_n.reshape(ny, nx, 3)


def backward(tile_starts, tile_entries, tiles_x, tiles_y, width, height,
             fx, fy, cx, cy, c, a, b, nrm, s, alpha, color, orient, px, py,
             u_color, u_alpha, u_dsum, u_normal, g_ent):
    """Accumulate per-entry gradients for the blending pass.

    ``u_*`` are the upstream gradients of the forward outputs.  Gradients
    land in ``g_ent`` — one row per tile entry (not per splat), so rows
    are owned exclusively by their tile and the caller merges them into
    per-splat gradients afterwards.

    Per pixel the loss contribution is sum_k w_k T_k phi_k with
    T_k = prod_{j<k} (1 - w_j), which gives
    dL/dw_k = T_k phi_k - (suffix_k) / (1 - w_k)
    where suffix_k is the total contribution of entries behind k.
    """
    inv_s2 = 1.0 / (SIGMA_SCR * SIGMA_SCR)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            start = tile_starts[tid]
            end = tile_starts[tid + 1]
            if start == end:
                continue
            (x0, y0, nx, ny, pix_x, pix_y,
             dir_x, dir_y) = _tile_pixels(ty, tx, width, height,
                                          cx, cy, fx, fy)
            npix = pix_x.shape[0]
            sl = (slice(y0, y0 + ny), slice(x0, x0 + nx))
            uc = u_color[sl].reshape(npix, 3)
            ua = u_alpha[sl].reshape(npix)
            ud = u_dsum[sl].reshape(npix)
            un = u_normal[sl].reshape(npix, 3)

            # Pass 1: total per-pixel contribution sum_k w_k T_k phi_k.
            T = np.ones(npix)
            phi_total = np.zeros(npix)
            for e in range(start, end):
                i = tile_entries[e]
                (hit, t_hit, u, v, g_obj, g_scr, _nd,
                 _rx, _ry, _rz, _dx, _dy) = _entry_response(
                    c[i], a[i], b[i], nrm[i], s[i],
                    pix_x, pix_y, dir_x, dir_y, px[i], py[i])
                g_hat = np.maximum(g_obj, g_scr)
                live = (T >= TMIN) & (g_hat >= CUTOFF)
                w = np.where(live, alpha[i] * g_hat, 0.0)
                d_hit = np.where(hit, t_hit, c[i, 2])
                phi = (uc[:, 0] * color[i, 0] + uc[:, 1] * color[i, 1]
                       + uc[:, 2] * color[i, 2] + ua + ud * d_hit
                       + orient[i] * (un[:, 0] * nrm[i, 0]
                                      + un[:, 1] * nrm[i, 1]
                                      + un[:, 2] * nrm[i, 2]))
                phi_total += w * T * phi
                T = T * (1.0 - w)

            # Pass 2: per-entry gradients using suffix sums.
            T = np.ones(npix)
            prefix = np.zeros(npix)
            for e in range(start, end):
                i = tile_entries[e]
                (hit, t_hit, u, v, g_obj, g_scr, nd,
                 relx, rely, relz, dx, dy) = _entry_response(
                    c[i], a[i], b[i], nrm[i], s[i],
                    pix_x, pix_y, dir_x, dir_y, px[i], py[i])
                g_hat = np.maximum(g_obj, g_scr)
                live = (T >= TMIN) & (g_hat >= CUTOFF)
                w = np.where(live, alpha[i] * g_hat, 0.0)
                d_hit = np.where(hit, t_hit, c[i, 2])
                phi = (uc[:, 0] * color[i, 0] + uc[:, 1] * color[i, 1]
                       + uc[:, 2] * color[i, 2] + ua + ud * d_hit
                       + orient[i] * (un[:, 0] * nrm[i, 0]
                                      + un[:, 1] * nrm[i, 1]
                                      + un[:, 2] * nrm[i, 2]))
                contrib = w * T
                prefix += contrib * phi
                suffix = phi_total - prefix
                gw = np.where(
                    live,
                    T * phi - suffix / np.maximum(1.0 - w, DIV_GUARD),
                    0.0)
                g_ghat = alpha[i] * gw
                row = g_ent[e]
                row[14] = np.sum(g_hat * gw)

                # Color, normal and (for misses) center-depth terms.
                row[15:18] = contrib @ uc
                gn_blend = orient[i] * (contrib @ un)
                gd = contrib * ud
                gcz_miss = np.sum(np.where(hit, 0.0, gd))

                # Object-space branch: g_hat == g_obj.
                obj = live & hit & (g_obj >= g_scr)
                g_gobj = np.where(obj, g_ghat * g_obj, 0.0)
                gu = -u * g_gobj
                gv = -v * g_gobj
                inv_su2 = 1.0 / (s[i, 0] * s[i, 0])
                inv_sv2 = 1.0 / (s[i, 1] * s[i, 1])
                da = (dir_x * a[i, 0] + dir_y * a[i, 1] + a[i, 2]) * inv_su2
                db = (dir_x * b[i, 0] + dir_y * b[i, 1] + b[i, 2]) * inv_sv2
                gt = gu * da + gv * db + np.where(hit, gd, 0.0)
                gt_nd = gt / nd
                # t = (n . c) / (n . dir):  dt/dc = n/nd, dt/dn = -rel/nd.
                gcx = np.sum(gt_nd) * nrm[i, 0] - np.sum(gu) * a[i, 0] * inv_su2 \
                    - np.sum(gv) * b[i, 0] * inv_sv2
                gcy = np.sum(gt_nd) * nrm[i, 1] - np.sum(gu) * a[i, 1] * inv_su2 \
                    - np.sum(gv) * b[i, 1] * inv_sv2
                gcz = np.sum(gt_nd) * nrm[i, 2] - np.sum(gu) * a[i, 2] * inv_su2 \
                    - np.sum(gv) * b[i, 2] * inv_sv2 + gcz_miss
                row[0] = gcx
                row[1] = gcy
                row[2] = gcz
                row[3] = np.sum(gu * relx) * inv_su2
                row[4] = np.sum(gu * rely) * inv_su2
                row[5] = np.sum(gu * relz) * inv_su2
                row[6] = np.sum(gv * relx) * inv_sv2
                row[7] = np.sum(gv * rely) * inv_sv2
                row[8] = np.sum(gv * relz) * inv_sv2
                row[9] = np.sum(-gt_nd * relx) + gn_blend[0]
                row[10] = np.sum(-gt_nd * rely) + gn_blend[1]
                row[11] = np.sum(-gt_nd * relz) + gn_blend[2]
                row[12] = np.sum(-2.0 * gu * u) / s[i, 0]
                row[13] = np.sum(-2.0 * gv * v) / s[i, 1]

                # Screen-space branch: g_hat == g_scr (strictly larger).
                g_gscr = np.where(live & ~obj, g_ghat * g_scr, 0.0)
                row[18] = np.sum(g_gscr * dx) * inv_s2
                row[19] = np.sum(g_gscr * dy) * inv_s2

                T = T * (1.0 - w)

"""Differentiable tile rasterization of posed surfels.

``render`` projects a batch of posed splats through a pinhole camera,
bins them into 16x16 pixel tiles, and alpha-blends them front to back
into color / alpha / expected-depth / normal buffers.  ``render_backward``
turns upstream image gradients into gradients for every splat field
(center, rotation, scale, opacity, spherical-harmonic coefficients).

Blending semantics per pixel: splats are sorted by center camera depth
(ties by splat index), each contributes weight w = opacity * g_hat where
g_hat = max(object-space Gaussian, screen-space low-pass Gaussian);
contributions below exp(-4.5) are skipped and accumulation stops once
transmittance drops under 1e-4.  The background is black with alpha 0.
"""

from dataclasses import dataclass, field

import numpy as np

from ..deform import PosedSplat, PosedSplatBatch
from ..quatgeom import (
    SH_DC_OFFSET,
    quat_to_mat,
    quat_to_mat_jac,
    sh_basis,
    sh_basis_dir_grad,
)
from . import backend as _backend
from .camera import Camera
from .common import CUTOFF, GRAD_COLS, SIGMA_SCR, TILE

CULL_DEPTH_EPS = 1e-6        # splats at or behind this camera depth are dropped
DEPTH_NORM_EPS = 1e-8        # depth = weighted sum / max(alpha, this)
_QUAT_EPS = 1e-12

# Pixel radius of the screen-space low-pass support at the 3-sigma cutoff,
# plus one pixel of slack for the integer tile arithmetic.
_LOWPASS_RADIUS = 3.0 * SIGMA_SCR + 1.0


@dataclass
class RenderCtx:
    """Recorded state from a forward pass, consumed by render_backward."""

    camera: Camera
    kernels: object
    n_input: int
    keep: np.ndarray          # (M,) original splat index, depth-sorted order
    c: np.ndarray             # (M, 3) centers, camera frame
    a: np.ndarray             # (M, 3) scaled u-axis, camera frame
    b: np.ndarray             # (M, 3) scaled v-axis, camera frame
    nrm: np.ndarray           # (M, 3) unit normals, camera frame
    s: np.ndarray             # (M, 2) scales
    alpha: np.ndarray         # (M,)
    color: np.ndarray         # (M, 3) evaluated view-dependent colors
    orient: np.ndarray        # (M,) +-1 normal orientation sign
    px: np.ndarray            # (M,) projected center x (pixels)
    py: np.ndarray            # (M,)
    qhat: np.ndarray          # (M, 4) unit quaternions
    qnorm: np.ndarray         # (M,) input quaternion norms
    tu_c: np.ndarray          # (M, 3) unit u-axis, camera frame
    tv_c: np.ndarray          # (M, 3) unit v-axis, camera frame
    view: np.ndarray          # (M, 3) world-frame view directions
    view_dist: np.ndarray     # (M,)
    basis: np.ndarray         # (M, 9) harmonic basis at view
    rgb_pre: np.ndarray       # (M, 3) colors before the non-negativity clamp
    sh: np.ndarray            # (M, 9, 3) coefficients, sorted order
    tile_starts: np.ndarray   # (tiles_x * tiles_y + 1,)
    tile_entries: np.ndarray  # (E,) indices into the sorted arrays
    tiles_x: int
    tiles_y: int
    out_alpha: np.ndarray     # (H, W) forward alpha, for depth normalization
    out_dsum: np.ndarray      # (H, W) forward weighted depth sum


@dataclass
class RenderOutput:
    """Rendered buffers plus the context needed for gradients."""

    color: np.ndarray         # (H, W, 3) premultiplied, black background
    alpha: np.ndarray         # (H, W) = 1 - final transmittance
    depth: np.ndarray         # (H, W) expected depth (alpha-normalized)
    normal: np.ndarray        # (H, W, 3) blended camera-frame normals
    ctx: RenderCtx = field(repr=False, default=None)

    @property
    def transmittance(self):
        """Per-pixel final transmittance (1 - alpha)."""
        return 1.0 - self.alpha


def _as_batch(splats):
    if isinstance(splats, PosedSplatBatch):
        return splats
    if isinstance(splats, PosedSplat):
        splats = [splats]
    splats = list(splats)
    if not splats:
        return PosedSplatBatch(
            center=np.zeros((0, 3)), rot=np.zeros((0, 4)),
            scale=np.zeros((0, 2)), opacity=np.zeros(0),
            sh=np.zeros((0, 9, 3)))
    return PosedSplatBatch(
        center=np.array([sp.center for sp in splats], dtype=np.float64),
        rot=np.array([sp.rot for sp in splats], dtype=np.float64),
        scale=np.array([sp.scale for sp in splats], dtype=np.float64),
        opacity=np.array([sp.opacity for sp in splats], dtype=np.float64),
        sh=np.array([sp.sh for sp in splats], dtype=np.float64),
        source=np.array([sp.source for sp in splats], dtype=np.int64))


def _check_finite(batch):
    for name in ("center", "rot", "scale", "opacity", "sh"):
        if not np.all(np.isfinite(getattr(batch, name))):
            raise FloatingPointError(
                "non-finite splat parameters in %r" % name)


def tile_bounds(px, py, c, s, fx, fy, width, height):
    """Conservative per-splat tile rectangles.

    A splat's response exceeds the cutoff only inside its 3-sigma
    object-space ellipse or the low-pass disk.  The ellipse lies inside
    the sphere of radius r = 3 * max(scale) around the center; for a
    sphere point P, |P_x/P_z - c_x/c_z| <= r (1 + |c_x|/c_z) / (c_z - r),
    giving a pixel-space half-extent.  Splats whose bound collapses
    (sphere reaching the camera plane) conservatively touch every tile.

    Returns:
        (tx0, tx1, ty0, ty1, valid): inclusive tile ranges and an
        on-screen mask, all (M,) arrays.
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    r3 = 3.0 * np.max(s, axis=1)
    cz = c[:, 2]
    zmin = cz - r3
    degenerate = zmin <= CULL_DEPTH_EPS
    safe_zmin = np.where(degenerate, 1.0, zmin)
    rx = fx * r3 * (1.0 + np.abs(c[:, 0]) / cz) / safe_zmin + _LOWPASS_RADIUS
    ry = fy * r3 * (1.0 + np.abs(c[:, 1]) / cz) / safe_zmin + _LOWPASS_RADIUS
    rx = np.where(degenerate, np.inf, rx)
    ry = np.where(degenerate, np.inf, ry)
    valid = ((px + rx >= 0.0) & (px - rx <= width - 1.0)
             & (py + ry >= 0.0) & (py - ry <= height - 1.0))
    tx0 = np.clip(np.floor((px - rx) / TILE), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((px + rx) / TILE), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((py - ry) / TILE), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((py + ry) / TILE), 0, tiles_y - 1).astype(np.int64)
    return tx0, tx1, ty0, ty1, valid


def _bin_tiles(px, py, c, s, camera):
    """Counting-sort splats into per-tile entry lists in depth order."""
    tiles_x = (camera.width + TILE - 1) // TILE
    tiles_y = (camera.height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    tx0, tx1, ty0, ty1, valid = tile_bounds(
        px, py, c, s, camera.fx, camera.fy, camera.width, camera.height)
    counts = np.zeros((tiles_y, tiles_x), dtype=np.int64)
    m = px.shape[0]
    for i in range(m):
        if valid[i]:
            counts[ty0[i]:ty1[i] + 1, tx0[i]:tx1[i] + 1] += 1
    tile_starts = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts.ravel(), out=tile_starts[1:])
    cursor = tile_starts[:-1].copy()
    tile_entries = np.empty(int(tile_starts[-1]), dtype=np.int64)
    for i in range(m):
        if not valid[i]:
            continue
        for ty in range(ty0[i], ty1[i] + 1):
            base = ty * tiles_x
            slots = cursor[base + tx0[i]:base + tx1[i] + 1]
            tile_entries[slots] = i
            cursor[base + tx0[i]:base + tx1[i] + 1] += 1
    return tile_starts, tile_entries, tiles_x, tiles_y


def render(splats, camera, backend=None):
    """Rasterize posed splats through a pinhole camera.

    Args:
        splats: PosedSplatBatch, or a sequence of PosedSplat.
        camera: Camera.
        backend: kernel backend override ("numba" | "numpy" | "auto");
            None reads the BODYSPLAT_BACKEND environment variable.

    Returns:
        RenderOutput with (H, W[, 3]) float64 buffers and a gradient
        context.  Splats at or behind the camera plane are culled.

    Raises:
        FloatingPointError: non-finite splat parameters.
        ValueError / RuntimeError: unknown or unavailable backend.
    """
    batch = _as_batch(splats)
    _check_finite(batch)
    kernels = _backend.get_kernels(backend)
    h, w = camera.height, camera.width
    rot_cam = camera.rotation
    centers_c_all = batch.center @ rot_cam.T + camera.translation

    keep = np.flatnonzero(centers_c_all[:, 2] > CULL_DEPTH_EPS)
    qnorm = np.linalg.norm(batch.rot[keep], axis=1)
    if keep.size and np.min(qnorm) <= _QUAT_EPS:
        raise FloatingPointError("zero-length splat rotation quaternion")
    order = np.argsort(centers_c_all[keep, 2], kind="stable")
    keep = keep[order]
    qnorm = qnorm[order]

    c = np.ascontiguousarray(centers_c_all[keep])
    scale = np.ascontiguousarray(batch.scale[keep].astype(np.float64))
    opacity = np.ascontiguousarray(batch.opacity[keep].astype(np.float64))
    sh = np.ascontiguousarray(batch.sh[keep].astype(np.float64))
    qhat = batch.rot[keep] / qnorm[:, None]
    rot_w = quat_to_mat(qhat)                      # (M, 3, 3)
    tu_c = rot_w[:, :, 0] @ rot_cam.T
    tv_c = rot_w[:, :, 1] @ rot_cam.T
    nrm = np.ascontiguousarray(rot_w[:, :, 2] @ rot_cam.T)
    a = np.ascontiguousarray(scale[:, 0:1] * tu_c)
    b = np.ascontiguousarray(scale[:, 1:2] * tv_c)
    orient = np.where(np.einsum("ij,ij->i", nrm, c) > 0.0, -1.0, 1.0)
    px = camera.fx * c[:, 0] / c[:, 2] + camera.cx
    py = camera.fy * c[:, 1] / c[:, 2] + camera.cy

    # View-dependent color toward each splat center.
    delta = batch.center[keep] - camera.center_world
    view_dist = np.linalg.norm(delta, axis=1)
    view = delta / np.maximum(view_dist, _QUAT_EPS)[:, None]
    basis = sh_basis(view)
    rgb_pre = np.einsum("nb,nbc->nc", basis, sh) + SH_DC_OFFSET
    color = np.ascontiguousarray(np.maximum(rgb_pre, 0.0))

    tile_starts, tile_entries, tiles_x, tiles_y = _bin_tiles(
        px, py, c, scale, camera)

    out_color = np.zeros((h, w, 3))
    out_alpha = np.zeros((h, w))
    out_dsum = np.zeros((h, w))
    out_normal = np.zeros((h, w, 3))
    if keep.size:
        kernels.forward(
            tile_starts, tile_entries, tiles_x, tiles_y, w, h,
            camera.fx, camera.fy, camera.cx, camera.cy,
            c, a, b, nrm, scale, opacity, color, orient,
            np.ascontiguousarray(px), np.ascontiguousarray(py),
            out_color, out_alpha, out_dsum, out_normal)
    depth = out_dsum / np.maximum(out_alpha, DEPTH_NORM_EPS)

    ctx = RenderCtx(
        camera=camera, kernels=kernels, n_input=batch.count, keep=keep,
        c=c, a=a, b=b, nrm=nrm, s=scale, alpha=opacity, color=color,
        orient=orient, px=np.ascontiguousarray(px),
        py=np.ascontiguousarray(py), qhat=qhat, qnorm=qnorm,
        tu_c=tu_c, tv_c=tv_c, view=view, view_dist=view_dist,
        basis=basis, rgb_pre=rgb_pre, sh=sh,
        tile_starts=tile_starts, tile_entries=tile_entries,
        tiles_x=tiles_x, tiles_y=tiles_y,
        out_alpha=out_alpha, out_dsum=out_dsum)
    return RenderOutput(color=out_color, alpha=out_alpha, depth=depth,
                        normal=out_normal, ctx=ctx)


def render_backward(out, g_color=None, g_alpha=None, g_depth=None,
                    g_normal=None):
    """Backpropagate image gradients to splat parameters.

    Args:
        out: RenderOutput from render().
        g_color: (H, W, 3) upstream gradient or None.
        g_alpha, g_depth: (H, W) upstream gradients or None.
        g_normal: (H, W, 3) upstream gradient or None.

    Returns:
        dict with per-splat gradient arrays over the *input* batch:
        "center" (N, 3), "rot" (N, 4), "scale" (N, 2), "opacity" (N,),
        "sh" (N, 9, 3).  Culled splats receive zeros.
    """
    ctx = out.ctx
    cam = ctx.camera
    h, w = cam.height, cam.width
    n = ctx.n_input
    grads = {
        "center": np.zeros((n, 3)),
        "rot": np.zeros((n, 4)),
        "scale": np.zeros((n, 2)),
        "opacity": np.zeros(n),
        "sh": np.zeros((n, 9, 3)),
    }
    m = ctx.keep.size
    if m == 0:
        return grads

    u_color = np.zeros((h, w, 3)) if g_color is None else \
        np.ascontiguousarray(g_color, dtype=np.float64)
    u_alpha = np.zeros((h, w)) if g_alpha is None else \
        np.asarray(g_alpha, dtype=np.float64).copy()
    u_normal = np.zeros((h, w, 3)) if g_normal is None else \
        np.ascontiguousarray(g_normal, dtype=np.float64)
    # Fold the depth normalization depth = dsum / max(alpha, eps) into
    # the upstream gradients of the raw kernel outputs (dsum, alpha).
    if g_depth is None:
        u_dsum = np.zeros((h, w))
    else:
        g_depth = np.asarray(g_depth, dtype=np.float64)
        denom = np.maximum(ctx.out_alpha, DEPTH_NORM_EPS)
        u_dsum = np.ascontiguousarray(g_depth / denom)
        u_alpha = u_alpha - np.where(
            ctx.out_alpha > DEPTH_NORM_EPS,
            g_depth * ctx.out_dsum / (denom * denom), 0.0)
    u_alpha = np.ascontiguousarray(u_alpha)

    g_ent = np.zeros((ctx.tile_entries.shape[0], GRAD_COLS))
    ctx.kernels.backward(
        ctx.tile_starts, ctx.tile_entries, ctx.tiles_x, ctx.tiles_y, w, h,
        cam.fx, cam.fy, cam.cx, cam.cy,
        ctx.c, ctx.a, ctx.b, ctx.nrm, ctx.s, ctx.alpha, ctx.color,
        ctx.orient, ctx.px, ctx.py,
        u_color, u_alpha, u_dsum, u_normal, g_ent)

    g_splat = np.zeros((m, GRAD_COLS))
    np.add.at(g_splat, ctx.tile_entries, g_ent)
    gc = g_splat[:, 0:3]
    ga = g_splat[:, 3:6]
    gb = g_splat[:, 6:9]
    gn = g_splat[:, 9:12]
    gs = g_splat[:, 12:14].copy()
    g_opacity = g_splat[:, 14]
    g_rgb = g_splat[:, 15:18]
    gpx = g_splat[:, 18]
    gpy = g_splat[:, 19]

    # Projected center: px = fx * cx_c / cz_c + cx.
    cz = ctx.c[:, 2]
    gc = gc.copy()
    gc[:, 0] += gpx * cam.fx / cz
    gc[:, 1] += gpy * cam.fy / cz
    gc[:, 2] -= (gpx * cam.fx * ctx.c[:, 0]
                 + gpy * cam.fy * ctx.c[:, 1]) / (cz * cz)

    rot_cam = cam.rotation
    g_center_w = gc @ rot_cam

    # Scaled camera-frame axes a = s0 * tu_c, b = s1 * tv_c.
    gs[:, 0] += np.einsum("ij,ij->i", ga, ctx.tu_c)
    gs[:, 1] += np.einsum("ij,ij->i", gb, ctx.tv_c)
    g_tu_w = (ctx.s[:, 0:1] * ga) @ rot_cam
    g_tv_w = (ctx.s[:, 1:2] * gb) @ rot_cam
    g_tw_w = gn @ rot_cam

    # Rotation matrix columns -> quaternion (through normalization).
    g_rotmat = np.stack([g_tu_w, g_tv_w, g_tw_w], axis=2)
    jac = quat_to_mat_jac(ctx.qhat)                  # (M, 3, 3, 4)
    g_qhat = np.einsum("nijk,nij->nk", jac, g_rotmat)
    g_rot = (g_qhat - ctx.qhat
             * np.einsum("nk,nk->n", ctx.qhat, g_qhat)[:, None]) \
        / ctx.qnorm[:, None]

    # Color clamp and harmonic expansion; view direction moves with the
    # splat center, so its chain feeds back into the center gradient.
    g_pre = np.where(ctx.rgb_pre > 0.0, g_rgb, 0.0)
    g_sh = np.einsum("nb,nc->nbc", ctx.basis, g_pre)
    dbasis = sh_basis_dir_grad(ctx.view)             # (M, 9, 3)
    g_view = np.einsum("nc,nbc,nbd->nd", g_pre, ctx.sh, dbasis)
    g_delta = (g_view - ctx.view
               * np.einsum("nd,nd->n", ctx.view, g_view)[:, None]) \
        / np.maximum(ctx.view_dist, _QUAT_EPS)[:, None]
    g_center_w = g_center_w + g_delta

    grads["center"][ctx.keep] = g_center_w
    grads["rot"][ctx.keep] = g_rot
    grads["scale"][ctx.keep] = gs
    grads["opacity"][ctx.keep] = g_opacity
    grads["sh"][ctx.keep] = g_sh
    return grads

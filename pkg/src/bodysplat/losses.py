"""Training losses and image metrics.

Seven weighted terms drive avatar optimization: masked L1 and MSE photo
losses, an optional pluggable perceptual term, two scale regularizers
(a global anisotropy penalty and a joint-region size penalty), a normal
consistency loss tying rendered splat normals to depth-derived surface
normals, and a rotation-consistency penalty keeping learned rotation
corrections close to the skinned rotations.  PSNR and SSIM evaluation
metrics live here too.

Every differentiable term has an explicit `_backward` companion; the
thresholded set memberships in the scale penalties are treated as
constants per step (straight-through selection).
"""

from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

_MASK_GUARD = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights and thresholds of the total training loss."""

    l1: float = 1.0
    mse: float = 10.0
    perceptual: float = 0.01
    scaling: float = 20.0
    joint: float = 10.0
    normal: float = 0.01
    rcn: float = 0.1
    eps_s: float = 0.008   # max-scale threshold of the anisotropy penalty
    eps_r: float = 5.0     # max/min scale ratio threshold
    tau: float = 0.01      # joint-region max-scale threshold

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass(frozen=True)
class LossReport:
    """Per-term scalar values and their weighted total."""

    l1: float = 0.0
    mse: float = 0.0
    perceptual: float = 0.0
    scaling: float = 0.0
    joint: float = 0.0
    normal: float = 0.0
    rcn: float = 0.0
    total: float = 0.0

    def to_dict(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def total_loss(report: dict, weights: LossWeights) -> LossReport:
    """Weighted sum of the term values in `report` (missing terms = 0)."""
    terms = {name: float(report.get(name, 0.0))
             for name in ("l1", "mse", "perceptual", "scaling",
                          "joint", "normal", "rcn")}
    total = sum(getattr(weights, name) * value
                for name, value in terms.items())
    return LossReport(total=total, **terms)


# ---------------------------------------------------------------------------
# Photometric terms
# ---------------------------------------------------------------------------

def _masked(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred/target shape mismatch: %s vs %s"
                         % (pred.shape, target.shape))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:2]:
        raise ValueError("mask shape %s does not match image %s"
                         % (mask.shape, pred.shape))
    count = int(mask.sum())
    if count == 0:
        raise ValueError("empty mask: no pixels to compare")
    if pred.ndim == 3:
        mask = mask[..., None]
    denom = float(count) * (pred.shape[2] if pred.ndim == 3 else 1)
    return pred, target, mask, denom


def l1_mse(pred, target, mask):
    """Masked mean absolute and mean squared error.

    Args:
        pred, target: (H, W, 3) or (H, W) images.
        mask: (H, W) boolean foreground mask.

    Returns:
        (l1, mse) floats, averaged over masked pixels and channels.

    Raises:
        ValueError: shape mismatch or empty mask.
    """
    pred, target, mask, denom = _masked(pred, target, mask)
    diff = np.where(mask, pred - target, 0.0)
    return float(np.abs(diff).sum() / denom), float((diff * diff).sum() / denom)


def l1_mse_backward(pred, target, mask):
    """Gradients of the two photometric means w.r.t. `pred`."""
    pred, target, mask, denom = _masked(pred, target, mask)
    diff = np.where(mask, pred - target, 0.0)
    g_l1 = np.sign(diff) / denom
    g_mse = 2.0 * diff / denom
    return g_l1, g_mse


# ---------------------------------------------------------------------------
# Scale regularizers
# ---------------------------------------------------------------------------

def scaling_loss(scale, eps_s: float = 0.008, eps_r: float = 5.0):
    """Mean max-scale over splats that are both large and anisotropic.

    A splat violates when max(s) > eps_s and max(s)/min(s) > eps_r;
    the loss is the mean of max(s) over the violating set (0 if empty).
    """
    scale = np.asarray(scale, dtype=np.float64)
    s_max = scale.max(axis=1)
    s_min = scale.min(axis=1)
    viol = (s_max > eps_s) & (s_max > eps_r * s_min)
    if not viol.any():
        return 0.0
    return float(s_max[viol].mean())


def scaling_loss_backward(scale, eps_s: float = 0.008, eps_r: float = 5.0):
    """Gradient w.r.t. scale; the violating set is held fixed."""
    scale = np.asarray(scale, dtype=np.float64)
    g = np.zeros_like(scale)
    s_max = scale.max(axis=1)
    s_min = scale.min(axis=1)
    viol = (s_max > eps_s) & (s_max > eps_r * s_min)
    n = int(viol.sum())
    if n:
        rows = np.flatnonzero(viol)
        cols = scale[rows].argmax(axis=1)
        g[rows, cols] = 1.0 / n
    return g


def joint_loss(scale, in_joint, tau: float = 0.01):
    """Mean max-scale over joint-region splats exceeding `tau`.

    Args:
        scale: (N, 2) splat scales.
        in_joint: (N,) boolean, splat hosted on a joint-region face.
        tau: scale threshold.
    """
    scale = np.asarray(scale, dtype=np.float64)
    in_joint = np.asarray(in_joint, dtype=bool)
    s_max = scale.max(axis=1)
    viol = in_joint & (s_max > tau)
    if not viol.any():
        return 0.0
    return float(s_max[viol].mean())


def joint_loss_backward(scale, in_joint, tau: float = 0.01):
    """Gradient w.r.t. scale; the violating set is held fixed."""
    scale = np.asarray(scale, dtype=np.float64)
    in_joint = np.asarray(in_joint, dtype=bool)
    g = np.zeros_like(scale)
    s_max = scale.max(axis=1)
    viol = in_joint & (s_max > tau)
    n = int(viol.sum())
    if n:
        rows = np.flatnonzero(viol)
        cols = scale[rows].argmax(axis=1)
        g[rows, cols] = 1.0 / n
    return g


# ---------------------------------------------------------------------------
# Normal consistency
# ---------------------------------------------------------------------------

def depth_normals(depth, camera):
    """Camera-frame unit normals from central differences of a depth map.

    Back-projects each pixel to the 3D point depth * ray and crosses the
    two image-axis tangents.  Border pixels (no central difference) get
    a zero normal.  The normal is oriented toward the camera, matching
    the orientation convention of rendered splat normals.

    Returns:
        (normals (H, W, 3), ctx) where ctx carries intermediates for
        depth_normals_backward.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    rx = (np.arange(w) - camera.cx) / camera.fx
    ry = (np.arange(h) - camera.cy) / camera.fy
    rays = np.empty((h, w, 3))
    rays[..., 0] = rx[None, :]
    rays[..., 1] = ry[:, None]
    rays[..., 2] = 1.0
    dzdx = np.zeros_like(depth)
    dzdy = np.zeros_like(depth)
    dzdx[:, 1:-1] = 0.5 * (depth[:, 2:] - depth[:, :-2])
    dzdy[1:-1, :] = 0.5 * (depth[2:, :] - depth[:-2, :])
    tx = dzdx[..., None] * rays
    tx[..., 0] += depth / camera.fx
    ty = dzdy[..., None] * rays
    ty[..., 1] += depth / camera.fy
    n_raw = np.cross(tx, ty)
    ell = np.linalg.norm(n_raw, axis=-1)
    safe = ell > _MASK_GUARD
    ell_safe = np.where(safe, ell, 1.0)
    normals = -n_raw / ell_safe[..., None]
    normals[~safe] = 0.0
    interior = np.zeros((h, w), dtype=bool)
    interior[1:-1, 1:-1] = True
    normals[~interior] = 0.0
    ctx = (rays, tx, ty, n_raw, ell_safe, safe & interior, camera)
    return normals, ctx


def depth_normals_backward(ctx, g_normals):
    """Gradient of depth_normals w.r.t. the depth map."""
    rays, tx, ty, n_raw, ell_safe, valid, camera = ctx
    g_normals = np.where(valid[..., None], g_normals, 0.0)
    n_hat = n_raw / ell_safe[..., None]
    dot = np.einsum("...k,...k->...", n_hat, g_normals)
    g_raw = -(g_normals - n_hat * dot[..., None]) / ell_safe[..., None]
    g_tx = np.cross(ty, g_raw)
    g_ty = np.cross(g_raw, tx)
    g_depth = g_tx[..., 0] / camera.fx + g_ty[..., 1] / camera.fy
    g_dzdx = np.einsum("...k,...k->...", g_tx, rays)
    g_dzdy = np.einsum("...k,...k->...", g_ty, rays)
    g_depth[:, 2:] += 0.5 * g_dzdx[:, 1:-1]
    g_depth[:, :-2] -= 0.5 * g_dzdx[:, 1:-1]
    g_depth[2:, :] += 0.5 * g_dzdy[1:-1, :]
    g_depth[:-2, :] -= 0.5 * g_dzdy[1:-1, :]
    return g_depth


def normal_loss(render_out):
    """Blending-weighted disagreement between splat and depth normals.

    Per interior pixel the rendered contributions satisfy
    sum_i w_i T_i (1 - n_i . N) = alpha - normal_buffer . N with N the
    depth-derived normal, so the loss needs only the rendered buffers.
    Normalized by the total pixel count.
    """
    normals, _ = depth_normals(render_out.depth, render_out.ctx.camera)
    h, w = render_out.alpha.shape
    interior = np.zeros((h, w), dtype=bool)
    interior[1:-1, 1:-1] = True
    dot = np.einsum("...k,...k->...", render_out.normal, normals)
    per_pixel = np.where(interior, render_out.alpha - dot, 0.0)
    return float(per_pixel.sum() / (h * w))


def normal_loss_backward(render_out):
    """Upstream image gradients of normal_loss for render_backward.

    Returns:
        dict with "g_alpha", "g_normal", "g_depth" arrays.
    """
    normals, ctx = depth_normals(render_out.depth, render_out.ctx.camera)
    h, w = render_out.alpha.shape
    scale = 1.0 / (h * w)
    interior = np.zeros((h, w), dtype=bool)
    interior[1:-1, 1:-1] = True
    g_alpha = np.where(interior, scale, 0.0)
    g_normal = np.where(interior[..., None], -scale * normals, 0.0)
    g_n_buffers = np.where(interior[..., None],
                           -scale * render_out.normal, 0.0)
    g_depth = depth_normals_backward(ctx, g_n_buffers)
    return {"g_alpha": g_alpha, "g_normal": g_normal, "g_depth": g_depth}


# ---------------------------------------------------------------------------
# Rotation consistency
# ---------------------------------------------------------------------------

def _unit_rows(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= _MASK_GUARD):
        raise ValueError("zero-length quaternion in rotation loss")
    return q / n, n


def rcn_loss(q_ref, q_cmp):
    """|1 - mean quaternion dot| with hemisphere alignment.

    Args:
        q_ref, q_cmp: (N, 4) approximately-unit quaternions.

    Returns:
        float loss; 0 when every pair agrees up to sign.

    Raises:
        ValueError: length mismatch or zero quaternion.
    """
    q_ref = np.asarray(q_ref, dtype=np.float64)
    q_cmp = np.asarray(q_cmp, dtype=np.float64)
    if q_ref.shape != q_cmp.shape:
        raise ValueError("quaternion list shape mismatch: %s vs %s"
                         % (q_ref.shape, q_cmp.shape))
    a, _ = _unit_rows(q_ref)
    b, _ = _unit_rows(q_cmp)
    dots = np.einsum("nk,nk->n", a, b)
    return float(abs(1.0 - np.abs(dots).mean()))


def rcn_loss_backward(q_ref, q_cmp):
    """Gradients of rcn_loss w.r.t. both quaternion lists."""
    a, na = _unit_rows(q_ref)
    b, nb = _unit_rows(q_cmp)
    if a.shape != b.shape:
        raise ValueError("quaternion list shape mismatch")
    n = a.shape[0]
    dots = np.einsum("nk,nk->n", a, b)
    sign = np.where(dots < 0.0, -1.0, 1.0)
    m = np.abs(dots).mean()
    outer = -np.sign(1.0 - m) / n          # d|1-m|/dm, 0 exactly at m == 1
    g_bhat = outer * sign[:, None] * a
    g_ahat = outer * sign[:, None] * b
    g_b = (g_bhat - b * np.einsum("nk,nk->n", b, g_bhat)[:, None]) / nb
    g_a = (g_ahat - a * np.einsum("nk,nk->n", a, g_ahat)[:, None]) / na
    return g_a, g_b


# ---------------------------------------------------------------------------
# Evaluation metrics
# ---------------------------------------------------------------------------

def psnr(pred, target):
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 1e-10:
        return 100.0
    return float(min(100.0, -10.0 * np.log10(mse)))


def _ssim_window():
    half = 5
    coords = np.arange(-half, half + 1)
    g = np.exp(-(coords ** 2) / (2.0 * 1.5 ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(pred, target):
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Standard constants C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1; the
    SSIM map is averaged over window positions fully inside the image
    and over channels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    if pred.ndim == 2:
        pred = pred[..., None]
        target = target[..., None]
    h, w = pred.shape[:2]
    if h < 11 or w < 11:
        raise ValueError("image smaller than the 11x11 SSIM window")
    kernel = _ssim_window()
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    vals = []
    for ch in range(pred.shape[2]):
        x = pred[..., ch]
        y = target[..., ch]
        filt = lambda im: ndimage.correlate(im, kernel, mode="constant")
        mu_x = filt(x)
        mu_y = filt(y)
        var_x = filt(x * x) - mu_x * mu_x
        var_y = filt(y * y) - mu_y * mu_y
        cov = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        smap = num / den
        vals.append(smap[5:-5, 5:-5].mean())
    return float(np.mean(vals))

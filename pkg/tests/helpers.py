"""Independent reference implementations (oracles) used by the test suite.

Everything in this module is deliberately written in plain scalar /
brute-force style, duplicating documented contracts rather than reusing
the library's vectorized or tiled code paths, so that agreement between
the two is meaningful evidence of correctness.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from bodysplat.quatgeom import quat_to_mat, sh_basis

# Blending contract constants, restated here on purpose (the render module
# documents them; the oracle must not import them from the code under test).
ORACLE_CUTOFF = np.exp(-4.5)
ORACLE_TMIN = 1e-4
ORACLE_SIGMA_SCR = 0.7
ORACLE_PARALLEL_EPS = 1e-8
ORACLE_CULL_EPS = 1e-6
ORACLE_DEPTH_EPS = 1e-8


def brute_force_render(batch, camera):
    """Per-pixel full-sort reference renderer.

    Sorts every splat by center camera depth (stable, ties by index) and
    alpha-blends front to back at each pixel with scalar loops.  Implements
    the documented semantics: ray-plane intersection with screen-space
    low-pass fallback, contribution cutoff exp(-4.5), transmittance floor
    1e-4, black background.

    Args:
        batch: PosedSplatBatch.
        camera: Camera.

    Returns:
        dict with "color" (H, W, 3), "alpha" (H, W), "depth" (H, W),
        "normal" (H, W, 3) float64 buffers.
    """
    h, w = camera.height, camera.width
    rot_cam = camera.rotation
    color_buf = np.zeros((h, w, 3))
    alpha_buf = np.zeros((h, w))
    dsum_buf = np.zeros((h, w))
    normal_buf = np.zeros((h, w, 3))

    centers_c = batch.center @ rot_cam.T + camera.translation
    keep = [i for i in range(batch.count) if centers_c[i, 2] > ORACLE_CULL_EPS]
    keep.sort(key=lambda i: centers_c[i, 2])  # python sort is stable

    # Per-splat camera-frame quantities.
    entries = []
    for i in keep:
        q = np.asarray(batch.rot[i], dtype=np.float64)
        q = q / np.linalg.norm(q)
        rot = quat_to_mat(q)
        tu = rot_cam @ rot[:, 0]
        tv = rot_cam @ rot[:, 1]
        nrm = rot_cam @ rot[:, 2]
        c = centers_c[i]
        orient = -1.0 if float(nrm @ c) > 0.0 else 1.0
        px = camera.fx * c[0] / c[2] + camera.cx
        py = camera.fy * c[1] / c[2] + camera.cy
        delta = batch.center[i] - camera.center_world
        dist = np.linalg.norm(delta)
        view = delta / max(dist, 1e-12)
        rgb = sh_basis(view[None, :])[0] @ batch.sh[i] + 0.5
        entries.append({
            "c": c, "tu": tu, "tv": tv, "n": nrm,
            "s": np.asarray(batch.scale[i], dtype=np.float64),
            "alpha": float(batch.opacity[i]),
            "color": np.maximum(rgb, 0.0),
            "orient": orient, "px": px, "py": py,
        })

    for yi in range(h):
        for xi in range(w):
            dir_cam = np.array([(xi - camera.cx) / camera.fx,
                                (yi - camera.cy) / camera.fy, 1.0])
            transmittance = 1.0
            for ent in entries:
                nd = float(ent["n"] @ dir_cam)
                nu = float(ent["n"] @ ent["c"])
                valid = abs(nd) >= ORACLE_PARALLEL_EPS
                t_hit = nu / nd if valid else 0.0
                hit = valid and t_hit > 0.0
                g_obj = 0.0
                if hit:
                    rel = t_hit * dir_cam - ent["c"]
                    u = float(rel @ ent["tu"]) / ent["s"][0]
                    v = float(rel @ ent["tv"]) / ent["s"][1]
                    g_obj = np.exp(-0.5 * (u * u + v * v))
                dx = xi - ent["px"]
                dy = yi - ent["py"]
                g_scr = np.exp(-0.5 * (dx * dx + dy * dy)
                               / (ORACLE_SIGMA_SCR * ORACLE_SIGMA_SCR))
                g_hat = max(g_obj, g_scr)
                if g_hat < ORACLE_CUTOFF or transmittance < ORACLE_TMIN:
                    continue
                weight = ent["alpha"] * g_hat
                contrib = weight * transmittance
                d_hit = t_hit if hit else ent["c"][2]
                color_buf[yi, xi] += contrib * ent["color"]
                alpha_buf[yi, xi] += contrib
                dsum_buf[yi, xi] += contrib * d_hit
                normal_buf[yi, xi] += contrib * ent["orient"] * ent["n"]
                transmittance *= 1.0 - weight
    depth_buf = dsum_buf / np.maximum(alpha_buf, ORACLE_DEPTH_EPS)
    return {"color": color_buf, "alpha": alpha_buf, "depth": depth_buf,
            "normal": normal_buf}


def lbs_oracle(bundle, pose):
    """Scalar per-vertex linear-blend-skinning reference.

    Composes world joint transforms by recursive parent-chain walks with
    scipy rotations, then sums weighted rigid transforms vertex by vertex.

    Args:
        bundle: BodyBundle.
        pose: Pose.

    Returns:
        (V, 3) posed vertex positions.
    """
    v_cano = np.array(bundle.rest_vertices, dtype=np.float64)
    if pose.beta is not None and pose.beta.size:
        v_cano = v_cano + bundle.shape_basis @ pose.beta
    if bundle.joint_regressor is not None:
        joints = bundle.joint_regressor @ v_cano
    else:
        joints = np.array(bundle.joint_rest_positions, dtype=np.float64)
    parents = bundle.kinematic_parents

    cache = {}

    def world(j):
        if j in cache:
            return cache[j]
        rot = Rotation.from_rotvec(pose.theta[j]).as_matrix()
        p = int(parents[j])
        if p < 0:
            res = (rot, joints[j].copy())
        else:
            rot_p, t_p = world(p)
            res = (rot_p @ rot, rot_p @ (joints[j] - joints[p]) + t_p)
        cache[j] = res
        return res

    out = np.zeros_like(v_cano)
    for vi in range(v_cano.shape[0]):
        acc = np.zeros(3)
        for j in range(bundle.num_joints):
            wgt = float(bundle.skin_weights[vi, j])
            if wgt == 0.0:
                continue
            rot_w, t_w = world(j)
            acc += wgt * (rot_w @ (v_cano[vi] - joints[j]) + t_w)
        out[vi] = acc + pose.translation
    return out


def naive_ssim(pred, target):
    """Scalar-loop SSIM reference: 11x11 Gaussian window, sigma 1.5, L=1.

    Averages the SSIM map over window positions fully inside the image
    and over channels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[..., None]
        target = target[..., None]
    half = 5
    coords = np.arange(-half, half + 1)
    g1d = np.exp(-(coords ** 2) / (2.0 * 1.5 ** 2))
    win = np.outer(g1d, g1d)
    win /= win.sum()
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    h, w, nc = pred.shape
    vals = []
    for ch in range(nc):
        total = 0.0
        count = 0
        for yi in range(half, h - half):
            for xi in range(half, w - half):
                wx = pred[yi - half:yi + half + 1,
                          xi - half:xi + half + 1, ch]
                wy = target[yi - half:yi + half + 1,
                            xi - half:xi + half + 1, ch]
                mu_x = float((win * wx).sum())
                mu_y = float((win * wy).sum())
                var_x = float((win * wx * wx).sum()) - mu_x * mu_x
                var_y = float((win * wy * wy).sum()) - mu_y * mu_y
                cov = float((win * wx * wy).sum()) - mu_x * mu_y
                num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
                den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
                total += num / den
                count += 1
        vals.append(total / count)
    return float(np.mean(vals))


def mask_iou(a, b):
    """Intersection-over-union of two boolean masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def random_splat_batch(rng, count, width, height, fx,
                       z_range=(2.0, 6.0), xy_extent=1.5,
                       scale_range=(0.02, 0.6)):
    """Random PosedSplatBatch scattered in front of a canonical camera.

    Centers lie in a frustum-ish box, rotations are uniform unit quats
    (so edge-on splats occur), scales are log-uniform, opacities span
    (0.05, 0.95), and SH coefficients are small-noise around a random DC.
    """
    from bodysplat.deform import PosedSplatBatch

    center = np.column_stack([
        rng.uniform(-xy_extent, xy_extent, count),
        rng.uniform(-xy_extent, xy_extent, count),
        rng.uniform(z_range[0], z_range[1], count)])
    rot = rng.normal(size=(count, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    log_s = rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]),
                        size=(count, 2))
    scale = np.exp(log_s)
    opacity = rng.uniform(0.05, 0.95, count)
    sh = rng.normal(0.0, 0.15, size=(count, 9, 3))
    sh[:, 0, :] = rng.uniform(-0.5, 1.5, size=(count, 3))
    return PosedSplatBatch(center=center, rot=rot, scale=scale,
                           opacity=opacity, sh=sh)


def frontal_camera(width, height, fx=None):
    """Camera at the world origin looking down +z with identity extrinsics."""
    from bodysplat.raster.camera import Camera

    if fx is None:
        fx = 0.5 * width
    return Camera(fx=float(fx), fy=float(fx),
                  cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  width=int(width), height=int(height),
                  world_to_camera=np.eye(4))

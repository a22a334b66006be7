"""Quaternion algebra, triangle geometry, and spherical-harmonics shading.

Conventions used across the package:
  - quaternions are scalar-first (w, x, y, z), Hamilton product, right-handed
  - all functions broadcast over leading axes; components sit on the last axis
  - spherical harmonics cover bands 0-2 (9 coefficients per color channel)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# real SH constants, bands 0-2
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_DC_OFFSET = 0.5


class DegenerateGeometryError(ValueError):
    """Raised when geometry collapses (zero normals, zero-area triangles)."""


def normalize(v: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Normalize vectors along the last axis.

    With eps == 0 a zero vector raises DegenerateGeometryError; with eps > 0
    the norm is floored at eps instead.
    """
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if eps > 0.0:
        n = np.maximum(n, eps)
    elif not np.all(n > 0.0):
        raise DegenerateGeometryError("cannot normalize zero-length vector")
    return v / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b of scalar-first quaternions, broadcasting."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return normalize(q, eps=eps)


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (nearly) unit quaternion; renormalizes internally.

    Returns (..., 3, 3) with columns forming a right-handed orthonormal frame.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    m[..., 0, 1] = 2.0 * (x * y - w * z)
    m[..., 0, 2] = 2.0 * (x * z + w * y)
    m[..., 1, 0] = 2.0 * (x * y + w * z)
    m[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    m[..., 1, 2] = 2.0 * (y * z - w * x)
    m[..., 2, 0] = 2.0 * (x * z - w * y)
    m[..., 2, 1] = 2.0 * (y * z + w * x)
    m[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return m


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix, broadcasting.

    Shepperd-style branch on the largest diagonal candidate for stability.
    """
    m = np.asarray(m, dtype=np.float64)
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    cand = np.stack(
        [
            1.0 + m00 + m11 + m22,
            1.0 + m00 - m11 - m22,
            1.0 - m00 + m11 - m22,
            1.0 - m00 - m11 + m22,
        ],
        axis=-1,
    )
    best = np.argmax(cand, axis=-1)
    s = 2.0 * np.sqrt(np.maximum(np.take_along_axis(cand, best[..., None], -1)[..., 0], 1e-18))

    m01, m02, m10 = m[..., 0, 1], m[..., 0, 2], m[..., 1, 0]
    m12, m20, m21 = m[..., 1, 2], m[..., 2, 0], m[..., 2, 1]
    q_w = np.stack([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s], axis=-1)
    q_x = np.stack([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s], axis=-1)
    q_y = np.stack([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s], axis=-1)
    q_z = np.stack([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s], axis=-1)
    q = np.choose(best[..., None], [q_w, q_x, q_y, q_z])

    q = quat_normalize(q)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_to_mat_jac(q: np.ndarray) -> np.ndarray:
    """d quat_to_mat(q)[i,j] / d q[k] for unit q, shape (..., 3, 3, 4).

    The caller owns the normalization chain: quat_to_mat renormalizes its
    input, so compose this with the projection (I - qq^T)/|q| for raw q.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    o = np.zeros_like(w)
    jac = np.empty(q.shape[:-1] + (3, 3, 4), dtype=np.float64)
    # each entry: (d/dw, d/dx, d/dy, d/dz) of R[i, j]
    jac[..., 0, 0, :] = 2.0 * np.stack([o, o, -2.0 * y, -2.0 * z], axis=-1)
    jac[..., 0, 1, :] = 2.0 * np.stack([-z, y, x, -w], axis=-1)
    jac[..., 0, 2, :] = 2.0 * np.stack([y, z, w, x], axis=-1)
    jac[..., 1, 0, :] = 2.0 * np.stack([z, y, x, w], axis=-1)
    jac[..., 1, 1, :] = 2.0 * np.stack([o, -2.0 * x, o, -2.0 * z], axis=-1)
    jac[..., 1, 2, :] = 2.0 * np.stack([-x, -w, z, y], axis=-1)
    jac[..., 2, 0, :] = 2.0 * np.stack([-y, z, -w, x], axis=-1)
    jac[..., 2, 1, :] = 2.0 * np.stack([x, w, z, y], axis=-1)
    jac[..., 2, 2, :] = 2.0 * np.stack([o, -2.0 * x, -2.0 * y, o], axis=-1)
    return jac


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v by unit quaternions q (broadcasting)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u = q[..., 1:]
    w = q[..., :1]
    uv = np.cross(u, v)
    uuv = np.cross(u, uv)
    return v + 2.0 * (w * uv + uuv)


def axis_angle_to_mat(aa: np.ndarray) -> np.ndarray:
    """Rodrigues rotation of axis-angle vectors (..., 3) -> (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.maximum(angle, 1e-12)
    axis = aa / safe
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=-1
    ).reshape(aa.shape[:-1] + (3, 3))
    s = np.sin(angle)[..., None]
    c = np.cos(angle)[..., None]
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + s * k + (1.0 - c) * (k @ k)


@dataclass(frozen=True)
class Tri:
    """One triangle with per-vertex unit normals (immutable)."""

    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    n0: np.ndarray
    n1: np.ndarray
    n2: np.ndarray

    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(np.cross(self.v1 - self.v0, self.v2 - self.v0)))


def bary_point(t: Tri, u: float, v: float) -> np.ndarray:
    """Barycentric position u*v0 + v*v1 + (1-u-v)*v2 (values may leave the simplex)."""
    return u * t.v0 + v * t.v1 + (1.0 - u - v) * t.v2


def bary_normal(t: Tri, u: float, v: float) -> np.ndarray:
    """Unit normal interpolated barycentrically; raises if the blend cancels."""
    n = u * t.n0 + v * t.n1 + (1.0 - u - v) * t.n2
    m = np.linalg.norm(n)
    if m <= 1e-12:
        raise DegenerateGeometryError("interpolated normal vanished")
    return n / m


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values for unit directions, shape (..., 9)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack(
        [
            np.full_like(x, SH_C0),
            -SH_C1 * y,
            SH_C1 * z,
            -SH_C1 * x,
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ],
        axis=-1,
    )


def sh_basis_dir_grad(dirs: np.ndarray) -> np.ndarray:
    """d basis / d direction, shape (..., 9, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    g = np.stack(
        [
            zero, zero, zero,
            zero, np.full_like(x, -SH_C1), zero,
            zero, zero, np.full_like(x, SH_C1),
            np.full_like(x, -SH_C1), zero, zero,
            SH_C2[0] * y, SH_C2[0] * x, zero,
            zero, SH_C2[1] * z, SH_C2[1] * y,
            -2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z,
            SH_C2[3] * z, zero, SH_C2[3] * x,
            2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, zero,
        ],
        axis=-1,
    )
    return g.reshape(d.shape[:-1] + (9, 3))


def sh_eval(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Evaluate SH color toward unit directions.

    Args:
        sh: coefficients (..., 9, 3).
        dirs: unit view directions (..., 3).

    Returns:
        RGB (..., 3), DC offset +0.5 applied then clamped to >= 0.
    """
    sh = np.asarray(sh, dtype=np.float64)
    basis = sh_basis(dirs)
    rgb = np.einsum("...b,...bc->...c", basis, sh) + SH_DC_OFFSET
    return np.maximum(rgb, 0.0)

"""Homogeneous splat geometry and ray-splat intersection.

A surfel spans the plane patch P(u, v) = p + u * s_u * t_u + v * s_v * t_v,
packed as the homogeneous map H = [RS | p; 0 1] with S = diag(s_u, s_v, 0);
its normal is t_w = t_u x t_v.  Rendering casts the pixel ray, intersects
the plane, and evaluates the Gaussian in the local (u, v) chart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..deform import PosedSplat
from ..quatgeom import quat_to_mat
from .camera import Camera

PARALLEL_EPS = 1e-8


@dataclass(frozen=True)
class SplatGeom:
    """World-space homogeneous transform + normal + camera mean depth."""

    H: np.ndarray      # (4, 4)
    t_w: np.ndarray    # (3,) unit normal
    depth: float       # camera z of the center


def build_geom(ps: PosedSplat, cam: Camera) -> SplatGeom:
    """Assemble the homogeneous splat transform for one posed splat."""
    if np.any(np.asarray(ps.scale) <= 0.0):
        raise ValueError("splat scales must be positive")
    rot = quat_to_mat(ps.rot)
    h = np.eye(4)
    h[:3, 0] = ps.scale[0] * rot[:, 0]
    h[:3, 1] = ps.scale[1] * rot[:, 1]
    h[:3, 2] = 0.0
    h[:3, 3] = ps.center
    depth = float(cam.to_camera(ps.center[None, :])[0, 2])
    return SplatGeom(H=h, t_w=rot[:, 2], depth=depth)


def intersect(geom: SplatGeom, cam: Camera, pixel: tuple[float, float]
              ) -> tuple[float, float, float] | None:
    """Ray-splat intersection for the ray through `pixel`.

    Returns (u, v, depth) in splat-local coordinates and camera depth, or
    None when the ray is parallel to the splat plane or hits behind the
    camera.
    """
    x, y = pixel
    dir_cam = cam.ray_dir(x, y)
    dir_world = cam.rotation.T @ dir_cam
    origin = cam.center_world

    center = geom.H[:3, 3]
    n = geom.t_w
    denom = float(dir_world @ n)
    if abs(denom) < PARALLEL_EPS:
        return None
    t_hit = float((center - origin) @ n) / denom
    if t_hit <= 0.0:
        return None
    point = origin + t_hit * dir_world
    rel = point - center
    col_u = geom.H[:3, 0]
    col_v = geom.H[:3, 1]
    s_u = float(np.linalg.norm(col_u))
    s_v = float(np.linalg.norm(col_v))
    u = float(rel @ col_u) / (s_u * s_u)
    v = float(rel @ col_v) / (s_v * s_v)
    # ray direction is z-normalized, so the camera depth of the hit equals t
    return u, v, t_hit

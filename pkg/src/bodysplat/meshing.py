"""Avatar-to-mesh conversion.

Depth maps rendered from a virtual camera orbit are fused into a
truncated signed-distance volume, and the zero isosurface is extracted
with marching cubes.  Signed distances are positive in front of the
observed surface (outside) and negative behind it, stored normalized by
the truncation band so every value lies in [-1, 1].

Voxels the orbit never observes keep weight 0; before isosurface
extraction they are filled by connectivity: unobserved regions touching
the volume boundary count as outside, enclosed ones (the body interior)
as inside.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure

from . import serial
from .body import Pose, lbs_pose
from .deform import deform_avatar
from .raster import make_lookat_camera, render

TRUNC_VOXELS = 4.0     # truncation band, in voxels
ALPHA_MIN = 0.5        # depth samples under this coverage are ignored
CARVE_WEIGHT = 0.25    # strength of background (free-space) evidence


@dataclass
class TsdfVolume:
    """Axis-aligned truncated signed-distance grid with cubic voxels.

    Attributes:
        origin: (3,) world position of voxel index (0, 0, 0).
        voxel: edge length of one voxel.
        tsdf: (nx, ny, nz) normalized signed distance in [-1, 1].
        weight: (nx, ny, nz) observation counts, >= 0.
    """

    origin: np.ndarray
    voxel: float
    tsdf: np.ndarray
    weight: np.ndarray

    @property
    def resolution(self) -> tuple:
        return self.tsdf.shape

    def validate(self) -> None:
        if self.tsdf.shape != self.weight.shape or self.tsdf.ndim != 3:
            raise ValueError("tsdf and weight must be matching 3-d grids")
        if self.voxel <= 0.0:
            raise ValueError("voxel size must be positive")
        if np.abs(self.tsdf).max(initial=0.0) > 1.0 + 1e-9:
            raise ValueError("tsdf values must lie in [-1, 1]")
        if self.weight.min(initial=0.0) < 0.0:
            raise ValueError("weights must be non-negative")

    @staticmethod
    def empty(origin, resolution, voxel: float) -> "TsdfVolume":
        """All-zero volume with the given per-axis resolution."""
        shape = tuple(int(r) for r in resolution)
        vol = TsdfVolume(
            origin=np.asarray(origin, dtype=np.float64).copy(),
            voxel=float(voxel),
            tsdf=np.zeros(shape), weight=np.zeros(shape))
        vol.validate()
        return vol

    @staticmethod
    def from_bounds(lo, hi, resolution: int, margin: int = 2) -> "TsdfVolume":
        """Volume covering [lo, hi]; the longest axis gets `resolution` voxels.

        `margin` extra voxels of air are added on every side so a surface
        near the bounds still closes.
        """
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        extent = hi - lo
        if resolution < 2 or (extent <= 0).any():
            raise ValueError("need resolution >= 2 and hi > lo on every axis")
        voxel = float(extent.max()) / float(resolution - 1)
        shape = np.ceil(extent / voxel).astype(int) + 1 + 2 * margin
        return TsdfVolume.empty(lo - margin * voxel, shape, voxel)

    def world_grid(self) -> np.ndarray:
        """(nx, ny, nz, 3) world coordinates of every voxel center."""
        nx, ny, nz = self.resolution
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        return self.origin + idx * self.voxel


def fuse_depth(volume: TsdfVolume, depth: np.ndarray, alpha: np.ndarray,
               camera, trunc_voxels: float = TRUNC_VOXELS,
               alpha_min: float = ALPHA_MIN) -> TsdfVolume:
    """Merge one rendered depth map into the volume (in place).

    Each voxel projects to its nearest pixel; pixels with coverage below
    `alpha_min` contribute nothing.  The signed distance along the ray,
    depth minus voxel depth, is normalized by the truncation band;
    voxels more than one band behind the surface are occluded and
    skipped, everything else enters a per-voxel running average with
    weight 1 per observation (so view order does not matter).

    Args:
        volume: grid to update.
        depth: (H, W) rendered depth map.
        alpha: (H, W) rendered coverage.
        camera: view the maps were rendered from.
        trunc_voxels: truncation band, in voxels.
        alpha_min: minimum coverage for a pixel to count.

    Returns:
        The updated volume (same object).
    """
    h, w = depth.shape
    if alpha.shape != (h, w):
        raise ValueError("depth and alpha shapes differ")
    band = trunc_voxels * volume.voxel
    idx, yi, xi, z = _visible_voxels(volume, camera, (h, w))
    sdf = (depth[yi, xi] - z) / band
    upd = (alpha[yi, xi] >= alpha_min) & (sdf > -1.0)
    _accumulate(volume, idx[upd], np.minimum(sdf[upd], 1.0), 1.0)
    return volume


def carve_background(volume: TsdfVolume, alpha: np.ndarray, camera,
                     alpha_min: float = ALPHA_MIN,
                     weight: float = CARVE_WEIGHT) -> TsdfVolume:
    """Mark voxels seen through background pixels as free space (in place).

    A pixel whose coverage stays below `alpha_min` means its ray passed
    through empty space, so every voxel projecting to it receives a +1
    (air) vote.  The vote carries a small `weight` so silhouette-grazing
    carve rays cannot outvote genuine depth observations of nearby
    surface, only suppress stray speckle in otherwise-empty space.

    Returns:
        The updated volume (same object).
    """
    idx, yi, xi, _ = _visible_voxels(volume, camera, alpha.shape)
    bg = alpha[yi, xi] < alpha_min
    _accumulate(volume, idx[bg], 1.0, weight)
    return volume


def _visible_voxels(volume, camera, shape):
    """Flat indices + pixel coords of voxels projecting into the image."""
    h, w = shape
    pts = volume.world_grid().reshape(-1, 3)
    pix, z = camera.project(pts)
    xi = np.rint(pix[:, 0]).astype(np.int64)
    yi = np.rint(pix[:, 1]).astype(np.int64)
    ok = (z > 0) & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    idx = np.flatnonzero(ok)
    return idx, yi[idx], xi[idx], z[idx]


def _accumulate(volume, idx, values, obs_weight):
    """Weighted running average at the given flat voxel indices."""
    t = volume.tsdf.reshape(-1)
    wt = volume.weight.reshape(-1)
    t[idx] = (t[idx] * wt[idx] + values * obs_weight) / (wt[idx] + obs_weight)
    wt[idx] += obs_weight


def fill_unobserved(volume: TsdfVolume) -> TsdfVolume:
    """New volume with weight-0 voxels classified by connectivity.

    Unobserved regions connected to the volume boundary become air (+1);
    enclosed ones (e.g. the body interior, occluded from every view)
    become solid (-1).  Observed voxels are copied unchanged.
    """
    tsdf = volume.tsdf.copy()
    unseen = volume.weight == 0
    if unseen.any():
        labels, _ = ndimage.label(unseen)
        border = np.unique(np.concatenate([
            labels[0].ravel(), labels[-1].ravel(),
            labels[:, 0].ravel(), labels[:, -1].ravel(),
            labels[:, :, 0].ravel(), labels[:, :, -1].ravel()]))
        border = border[border != 0]
        outside = unseen & np.isin(labels, border)
        tsdf[outside] = 1.0
        tsdf[unseen & ~outside] = -1.0
    return TsdfVolume(origin=volume.origin.copy(), voxel=volume.voxel,
                      tsdf=tsdf, weight=volume.weight.copy())


@dataclass
class Mesh:
    """Triangle mesh with per-vertex normals."""

    vertices: np.ndarray   # (V, 3)
    faces: np.ndarray      # (T, 3) int
    normals: np.ndarray    # (V, 3) unit, outward

    @property
    def empty(self) -> bool:
        return self.faces.shape[0] == 0


def marching_cubes(volume: TsdfVolume, iso: float = 0.0) -> Mesh:
    """Extract the `iso` level set of the volume as a triangle mesh.

    Triangles are wound so geometric normals point toward increasing
    signed distance (outward).  A volume whose values never cross `iso`
    yields an empty mesh.
    """
    field = volume.tsdf
    if field.min() >= iso or field.max() <= iso:
        return Mesh(vertices=np.zeros((0, 3)),
                    faces=np.zeros((0, 3), dtype=np.int64),
                    normals=np.zeros((0, 3)))
    verts, faces, normals, _ = measure.marching_cubes(
        field, level=iso, spacing=(volume.voxel,) * 3,
        gradient_direction="descent")
    # skimage reports gradient-descent normals (into the surface for a
    # signed distance field); flip so they match the outward winding.
    return Mesh(vertices=verts + volume.origin,
                faces=faces.astype(np.int64),
                normals=-normals)


def closed_manifold(faces: np.ndarray) -> bool:
    """True when the faces form a closed, consistently wound 2-manifold.

    Every undirected edge must be shared by exactly two triangles with
    opposite directions (each directed edge appears exactly once), and
    no triangle may repeat a vertex.
    """
    faces = np.asarray(faces, dtype=np.int64)
    if faces.shape[0] == 0:
        return False
    if ((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
            | (faces[:, 0] == faces[:, 2])).any():
        return False
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]],
                               faces[:, [2, 0]]], axis=0)
    _, counts = np.unique(directed, axis=0, return_counts=True)
    if (counts != 1).any():
        return False
    undirected = np.sort(directed, axis=1)
    _, counts = np.unique(undirected, axis=0, return_counts=True)
    return bool((counts == 2).all())


def euler_characteristic(mesh: Mesh) -> int:
    """V - E + F of the mesh graph (2 for a topological sphere)."""
    directed = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]],
                               mesh.faces[:, [2, 0]]], axis=0)
    n_edges = np.unique(np.sort(directed, axis=1), axis=0).shape[0]
    n_verts = np.unique(mesh.faces.ravel()).shape[0]
    return int(n_verts - n_edges + mesh.faces.shape[0])


def save_obj(mesh: Mesh, path: str) -> None:
    """Write the mesh as Wavefront OBJ (v / vn / f, 1-based indices)."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.8g} {y:.8g} {z:.8g}")
    for x, y, z in mesh.normals:
        lines.append(f"vn {x:.8g} {y:.8g} {z:.8g}")
    for a, b, c in mesh.faces + 1:
        lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
    serial.write_blob(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _orbit_directions(n: int) -> np.ndarray:
    """n near-uniform unit directions on the sphere (golden spiral)."""
    i = np.arange(n, dtype=np.float64) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=-1)


def extract_avatar_mesh(model, resolution: int = 64, n_views: int = 36,
                        image_size: int = 128, pose: Pose = None,
                        trunc_voxels: float = TRUNC_VOXELS,
                        backend: str = None) -> Mesh:
    """Mesh the avatar's rendered surface in a given (default rest) pose.

    Renders depth from `n_views` cameras spread over a surrounding
    sphere, fuses them into a TSDF grid whose longest axis spans
    `resolution` voxels, and runs marching cubes on the filled field.

    Args:
        model: trained avatar.
        resolution: voxels along the longest bounding-box axis.
        n_views: orbit camera count.
        image_size: rendered depth map width and height.
        pose: body pose to mesh; rest pose when omitted.
        trunc_voxels: TSDF truncation band, in voxels.
        backend: rasterizer backend override.

    Returns:
        Mesh in world coordinates.
    """
    if pose is None:
        pose = Pose.rest(model.bundle)
    posed = lbs_pose(model.bundle, pose)
    batch, _ = deform_avatar(model, posed)
    pad = 3.0 * float(batch.scale.max())
    lo = batch.center.min(axis=0) - pad
    hi = batch.center.max(axis=0) + pad
    volume = TsdfVolume.from_bounds(lo, hi, resolution)

    center = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo))
    f = 1.2 * image_size
    dist = 1.4 * f * (2.0 * radius) / image_size
    c0 = (image_size - 1) / 2.0
    for direction in _orbit_directions(n_views):
        cam = make_lookat_camera(
            eye=center + dist * direction, target=center,
            fx=f, fy=f, cx=c0, cy=c0, width=image_size, height=image_size)
        out = render(batch, cam, backend=backend)
        fuse_depth(volume, out.depth, out.alpha, cam,
                   trunc_voxels=trunc_voxels)
        carve_background(volume, out.alpha, cam)
    return marching_cubes(fill_unobserved(volume))

"""Canonical-space avatar: surfels embedded on mesh triangles.

Each primitive is attached to one face by barycentric coordinates plus an
offset along the interpolated normal, and carries its own tangent-plane
scales, local rotation, opacity, and SH color.  This module covers triangle
sampling (joint regions are always covered), parameter initialization,
center evaluation, the triangle walk that re-embeds a splat when its
barycentric coordinates leave the simplex, and the avatar checkpoint format.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import serial
from .body import BodyBundle, JointTriSet, canonical_vertices, vertex_normals
from .quatgeom import SH_C0, SH_DC_OFFSET, DegenerateGeometryError, normalize

_RECORD_DTYPE = np.dtype(
    [
        ("k", "<i4"),
        ("u", "<f4"), ("v", "<f4"), ("d", "<f4"),
        ("s0", "<f4"), ("s1", "<f4"),
        ("qw", "<f4"), ("qx", "<f4"), ("qy", "<f4"), ("qz", "<f4"),
        ("alpha", "<f4"),
        ("sh", "<f4", (27,)),
    ]
)

DEFAULT_OPACITY = 0.1
_SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class SplatEmbedding:
    """A single primitive's attachment + appearance record."""

    face_index: int
    bary: np.ndarray       # (2,) = (u, v)
    offset: float
    scale: np.ndarray      # (2,)
    rot: np.ndarray        # (4,) unit quaternion
    opacity: float
    sh: np.ndarray         # (9, 3)


@dataclass
class AvatarModel:
    """All splats of one avatar, stored field-major for vectorized math."""

    bundle: BodyBundle
    joint_set: JointTriSet
    face: np.ndarray       # (N,) int
    bary: np.ndarray       # (N, 2)
    offset: np.ndarray     # (N,)
    scale: np.ndarray      # (N, 2)
    rot: np.ndarray        # (N, 4)
    opacity: np.ndarray    # (N,)
    sh: np.ndarray         # (N, 9, 3)

    @property
    def count(self) -> int:
        return int(self.face.shape[0])

    def splat(self, i: int) -> SplatEmbedding:
        return SplatEmbedding(
            face_index=int(self.face[i]),
            bary=np.array(self.bary[i]),
            offset=float(self.offset[i]),
            scale=np.array(self.scale[i]),
            rot=np.array(self.rot[i]),
            opacity=float(self.opacity[i]),
            sh=np.array(self.sh[i]),
        )

    def select(self, keep: np.ndarray) -> "AvatarModel":
        """New model holding only the splats selected by `keep` (mask or indices)."""
        return AvatarModel(
            bundle=self.bundle,
            joint_set=self.joint_set,
            face=self.face[keep].copy(),
            bary=self.bary[keep].copy(),
            offset=self.offset[keep].copy(),
            scale=self.scale[keep].copy(),
            rot=self.rot[keep].copy(),
            opacity=self.opacity[keep].copy(),
            sh=self.sh[keep].copy(),
        )

    def validate(self) -> None:
        n = self.count
        if n == 0:
            raise ValueError("avatar must hold at least one splat")
        if self.face.min() < 0 or self.face.max() >= self.bundle.num_faces:
            raise ValueError("splat face index out of range")
        if self.opacity.min() < 0.0 or self.opacity.max() > 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        if self.scale.min() <= 0.0:
            raise ValueError("scale components must be positive")
        qn = np.linalg.norm(self.rot, axis=-1)
        if np.abs(qn - 1.0).max() > 1e-5:
            raise ValueError("splat rotations must be unit quaternions")


# ---------------------------------------------------------------------------
# sampling + initialization


def sample_triangles(bundle: BodyBundle, n: int, joint_set: JointTriSet,
                     seed: int = 0) -> np.ndarray:
    """Face indices to host splats: all joint faces once, the rest uniform.

    The remaining n - |joint_set| indices are drawn uniformly with
    replacement over all faces; deterministic per seed.
    """
    base = np.asarray(joint_set.member_faces, dtype=np.int64)
    if n < base.shape[0]:
        raise ValueError(f"requested {n} splats but the joint set alone has {base.shape[0]} faces")
    rng = np.random.default_rng(seed)
    extra = rng.integers(0, bundle.num_faces, size=n - base.shape[0], dtype=np.int64)
    return np.concatenate([base, extra])


def _uniform_simplex(rng: np.random.Generator, n: int) -> np.ndarray:
    """n uniform samples of (u, v) over {u, v >= 0, u + v <= 1}."""
    a = rng.random(n)
    b = rng.random(n)
    flip = a + b > 1.0
    a = np.where(flip, 1.0 - a, a)
    b = np.where(flip, 1.0 - b, b)
    return np.stack([a, b], axis=-1)


def init_splats(bundle: BodyBundle, faces: np.ndarray, joint_set: JointTriSet,
                seed: int = 0, init_gray: float = 0.5) -> AvatarModel:
    """Fresh avatar on the given host faces.

    Barycentric coordinates uniform over the simplex; offset 0; identity
    rotation; opacity 0.1; SH zero except the DC term (set so the initial
    color is `init_gray`); both scale axes set to the distance to the
    nearest neighboring splat center.
    """
    faces = np.asarray(faces, dtype=np.int64)
    n = faces.shape[0]
    if n == 0:
        raise ValueError("cannot initialize an avatar with zero splats")
    rng = np.random.default_rng(seed)
    bary = _uniform_simplex(rng, n)

    sh = np.zeros((n, 9, 3))
    sh[:, 0, :] = (init_gray - SH_DC_OFFSET) / SH_C0

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0

    model = AvatarModel(
        bundle=bundle,
        joint_set=joint_set,
        face=faces,
        bary=bary,
        offset=np.zeros(n),
        scale=np.ones((n, 2)),
        rot=rot,
        opacity=np.full(n, DEFAULT_OPACITY),
        sh=sh,
    )
    centers = splat_centers(model)
    if n > 1:
        dist, _ = cKDTree(centers).query(centers, k=2)
        nn = np.maximum(dist[:, 1], _SCALE_FLOOR)
    else:
        tri = bundle.rest_vertices[bundle.faces[faces[0]]]
        edges = np.linalg.norm(tri - np.roll(tri, 1, axis=0), axis=-1)
        nn = np.array([max(edges.mean(), _SCALE_FLOOR)])
    model.scale = np.stack([nn, nn], axis=-1)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# centers


def embedded_points(vertices: np.ndarray, vnormals: np.ndarray, mesh_faces: np.ndarray,
                    face: np.ndarray, bary: np.ndarray, offset: np.ndarray,
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Splat centers + interpolated unit normals on an arbitrary mesh state.

    Returns (centers (N,3), normals (N,3)); raises when an interpolated
    normal vanishes.
    """
    tri = mesh_faces[face]                       # (N, 3) vertex ids
    v = vertices[tri]                            # (N, 3, 3)
    nrm = vnormals[tri]                          # (N, 3, 3)
    u = bary[:, 0:1]
    vv = bary[:, 1:2]
    w = 1.0 - u - vv
    p = u * v[:, 0] + vv * v[:, 1] + w * v[:, 2]
    n = u * nrm[:, 0] + vv * nrm[:, 1] + w * nrm[:, 2]
    ln = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(ln <= 1e-12):
        raise DegenerateGeometryError("interpolated splat normal vanished")
    n = n / ln
    return p + n * offset[:, None], n


def splat_centers(model: AvatarModel, beta: np.ndarray | None = None) -> np.ndarray:
    """Canonical-space centers of all splats."""
    v = canonical_vertices(model.bundle, beta)
    vn = vertex_normals(v, model.bundle.faces)
    centers, _ = embedded_points(v, vn, model.bundle.faces,
                                 model.face, model.bary, model.offset)
    return centers


def splat_center_canonical(e: SplatEmbedding, bundle: BodyBundle,
                           beta: np.ndarray | None = None) -> np.ndarray:
    """Canonical center of a single embedding (barycentric point + normal offset)."""
    v = canonical_vertices(bundle, beta)
    vn = vertex_normals(v, bundle.faces)
    centers, _ = embedded_points(
        v, vn, bundle.faces,
        np.array([e.face_index]), e.bary[None, :], np.array([e.offset]),
    )
    return centers[0]


# ---------------------------------------------------------------------------
# triangle walk


def build_adjacency(faces: np.ndarray) -> np.ndarray:
    """(F, 3) neighbor map: entry [f, c] is the face across the edge opposite
    vertex slot c of face f, or -1 on a boundary edge."""
    f_count = faces.shape[0]
    edge_map: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for f in range(f_count):
        a, b, c = (int(faces[f, 0]), int(faces[f, 1]), int(faces[f, 2]))
        for slot, (p, q) in enumerate(((b, c), (c, a), (a, b))):
            key = (p, q) if p < q else (q, p)
            edge_map.setdefault(key, []).append((f, slot))
    adj = np.full((f_count, 3), -1, dtype=np.int64)
    for users in edge_map.values():
        if len(users) == 2:
            (f0, s0), (f1, s1) = users
            adj[f0, s0] = f1
            adj[f1, s1] = f0
        elif len(users) > 2:
            raise ValueError("non-manifold edge: more than two incident faces")
    return adj


def clamp_simplex(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean projection of (u, v) points onto {u, v >= 0, u + v <= 1}."""
    u = np.maximum(u, 0.0)
    v = np.maximum(v, 0.0)
    over = u + v > 1.0
    # project onto the hypotenuse u + v = 1, then clip the corner overshoot
    excess = (u + v - 1.0) / 2.0
    pu = np.clip(u - excess, 0.0, 1.0)
    pv = 1.0 - pu
    u = np.where(over, pu, u)
    v = np.where(over, pv, v)
    return u, v


def _bary_of_points(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray,
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Barycentric coordinates of the in-plane projection of p on triangles (a,b,c).

    Returns weights (wa, wb, wc); wa + wb + wc = 1.  Only in-plane dot
    products enter, so the out-of-plane component of p is ignored — this IS
    the orthogonal projection.  Degenerate triangles yield denom ~ 0; the
    caller must mask those out.
    """
    e0 = b - a
    e1 = c - a
    ep = p - a
    d00 = np.einsum("...k,...k->...", e0, e0)
    d01 = np.einsum("...k,...k->...", e0, e1)
    d11 = np.einsum("...k,...k->...", e1, e1)
    d20 = np.einsum("...k,...k->...", ep, e0)
    d21 = np.einsum("...k,...k->...", ep, e1)
    denom = d00 * d11 - d01 * d01
    denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)  # guarded by caller
    wb = (d11 * d20 - d01 * d21) / denom
    wc = (d00 * d21 - d01 * d20) / denom
    return 1.0 - wb - wc, wb, wc


def walk_splats(face: np.ndarray, bary: np.ndarray, vertices: np.ndarray,
                mesh_faces: np.ndarray, adjacency: np.ndarray,
                ) -> tuple[np.ndarray, np.ndarray]:
    """Re-embed splats whose updated (u, v) left the simplex.

    For each offending splat: pick the edge opposite the most negative
    barycentric coordinate; if a neighbor face shares it, project the world
    point implied by the updated coordinates onto the neighbor's plane and
    take barycentric coordinates there; otherwise stay.  Either way the final
    coordinates are clamped onto the simplex.  One step per update.

    Returns (new_face, new_bary).
    """
    u = bary[:, 0].copy()
    v = bary[:, 1].copy()
    w = 1.0 - u - v
    face = face.copy()

    outside = (u < 0.0) | (v < 0.0) | (w < 0.0)
    idx = np.flatnonzero(outside)
    if idx.size:
        coords = np.stack([u[idx], v[idx], w[idx]], axis=-1)
        slot = np.argmin(coords, axis=-1)              # most negative coordinate
        nbr = adjacency[face[idx], slot]
        move = nbr >= 0
        mi = idx[move]
        if mi.size:
            tri_old = mesh_faces[face[mi]]
            p = (u[mi, None] * vertices[tri_old[:, 0]]
                 + v[mi, None] * vertices[tri_old[:, 1]]
                 + w[mi, None] * vertices[tri_old[:, 2]])
            new_face = nbr[move]
            tri_new = mesh_faces[new_face]
            wa, wb, wc = _bary_of_points(
                p, vertices[tri_new[:, 0]], vertices[tri_new[:, 1]], vertices[tri_new[:, 2]]
            )
            face[mi] = new_face
            u[mi] = wa
            v[mi] = wb
        u[idx], v[idx] = clamp_simplex(u[idx], v[idx])
    return face, np.stack([u, v], axis=-1)


def triangle_walk(e: SplatEmbedding, bundle: BodyBundle, updated_bary: np.ndarray,
                  adjacency: np.ndarray | None = None,
                  vertices: np.ndarray | None = None) -> SplatEmbedding:
    """Single-splat triangle walk (see walk_splats); other fields preserved."""
    if adjacency is None:
        adjacency = build_adjacency(bundle.faces)
    if vertices is None:
        vertices = bundle.rest_vertices
    face, bary = walk_splats(
        np.array([e.face_index], dtype=np.int64),
        np.asarray(updated_bary, dtype=np.float64)[None, :],
        vertices, bundle.faces, adjacency,
    )
    return SplatEmbedding(
        face_index=int(face[0]), bary=bary[0], offset=e.offset,
        scale=e.scale, rot=e.rot, opacity=e.opacity, sh=e.sh,
    )


# ---------------------------------------------------------------------------
# checkpoint format


def save_avatar(model: AvatarModel, out_dir: str, bundle_hash_hex: str) -> None:
    """Write avatar.json + avatar.bin (splat-major interleaved records)."""
    os.makedirs(out_dir, exist_ok=True)
    n = model.count
    rec = np.empty(n, dtype=_RECORD_DTYPE)
    rec["k"] = model.face
    rec["u"] = model.bary[:, 0]
    rec["v"] = model.bary[:, 1]
    rec["d"] = model.offset
    rec["s0"] = model.scale[:, 0]
    rec["s1"] = model.scale[:, 1]
    rec["qw"] = model.rot[:, 0]
    rec["qx"] = model.rot[:, 1]
    rec["qy"] = model.rot[:, 2]
    rec["qz"] = model.rot[:, 3]
    rec["alpha"] = model.opacity
    rec["sh"] = model.sh.reshape(n, 27)
    manifest = {
        "version": 1,
        "count": n,
        "layout": "splat-major",
        "record": [
            {"name": name, "dtype": _RECORD_DTYPE[name].base.str.lstrip("|"),
             "components": int(np.prod(_RECORD_DTYPE[name].shape or (1,)))}
            for name in _RECORD_DTYPE.names
        ],
        "sh_shape": [9, 3],
        "bundle_hash": bundle_hash_hex,
        "joint_faces": [int(x) for x in model.joint_set.member_faces],
    }
    serial.write_blob(os.path.join(out_dir, "avatar.bin"), rec.tobytes())
    serial.write_json(os.path.join(out_dir, "avatar.json"), manifest)


def load_avatar(in_dir: str, bundle: BodyBundle) -> AvatarModel:
    manifest = serial.read_json(os.path.join(in_dir, "avatar.json"))
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported avatar version: {manifest.get('version')!r}")
    blob = serial.read_blob(os.path.join(in_dir, "avatar.bin"))
    n = manifest["count"]
    if len(blob) != n * _RECORD_DTYPE.itemsize:
        raise ValueError(f"avatar.bin holds {len(blob)} bytes, expected "
                         f"{n * _RECORD_DTYPE.itemsize} for {n} splats")
    rec = np.frombuffer(blob, dtype=_RECORD_DTYPE, count=n)
    mask = np.zeros(bundle.num_faces, dtype=bool)
    joint_faces = np.asarray(manifest["joint_faces"], dtype=np.int64)
    mask[joint_faces] = True
    model = AvatarModel(
        bundle=bundle,
        joint_set=JointTriSet(member_faces=joint_faces, mask=mask),
        face=rec["k"].astype(np.int64),
        bary=np.stack([rec["u"], rec["v"]], axis=-1).astype(np.float64),
        offset=rec["d"].astype(np.float64),
        scale=np.stack([rec["s0"], rec["s1"]], axis=-1).astype(np.float64),
        rot=normalize(np.stack([rec["qw"], rec["qx"], rec["qy"], rec["qz"]], axis=-1)
                      .astype(np.float64)),
        opacity=rec["alpha"].astype(np.float64),
        sh=rec["sh"].astype(np.float64).reshape(n, 9, 3),
    )
    model.validate()
    return model

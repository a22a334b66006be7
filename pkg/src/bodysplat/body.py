"""Skinned body model: rest mesh + skeleton + blend weights, posed by LBS.

Also derives the per-triangle and per-vertex rotation quaternions that the
splat deformer consumes, the joint-region triangle set, and a procedural
articulated cylinder "mini body" used as the test substrate.

On-disk form: ``body.json`` manifest + ``body.bin`` packed arrays (see serial).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import serial
from .quatgeom import DegenerateGeometryError, axis_angle_to_mat, mat_to_quat, normalize

_AREA_EPS = 1e-12


@dataclass(frozen=True)
class BodyBundle:
    """Rest mesh, skeleton, and skinning data (immutable after construction)."""

    rest_vertices: np.ndarray      # (V, 3)
    faces: np.ndarray              # (F, 3) int
    joint_rest_positions: np.ndarray  # (J, 3)
    kinematic_parents: np.ndarray  # (J,) int, root = -1
    skin_weights: np.ndarray       # (V, J), rows sum to 1
    shape_basis: np.ndarray | None = None    # (V, 3, S)
    joint_regressor: np.ndarray | None = None  # (J, V)

    @property
    def num_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_rest_positions.shape[0]

    @property
    def num_shape_coeffs(self) -> int:
        return 0 if self.shape_basis is None else self.shape_basis.shape[2]

    def validate(self) -> None:
        """Raise ValueError on any structural invariant violation."""
        v, f, j = self.num_vertices, self.num_faces, self.num_joints
        if self.rest_vertices.shape != (v, 3):
            raise ValueError("rest_vertices must be (V, 3)")
        if self.faces.shape != (f, 3) or f == 0:
            raise ValueError("faces must be a nonempty (F, 3) array")
        if self.faces.min() < 0 or self.faces.max() >= v:
            raise ValueError("faces index out-of-range vertices")
        if self.skin_weights.shape != (v, j):
            raise ValueError("skin_weights must be (V, J)")
        if self.skin_weights.min() < 0:
            raise ValueError("skin weights must be nonnegative")
        sums = self.skin_weights.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("skin-weight rows must sum to 1 within 1e-5")
        parents = self.kinematic_parents
        if parents.shape != (j,) or parents[0] != -1:
            raise ValueError("kinematic_parents must be length J with root sentinel -1 at joint 0")
        for child in range(1, j):
            p, hops = child, 0
            while p != -1:
                p = int(parents[p])
                hops += 1
                if hops > j:
                    raise ValueError("kinematic_parents contains a cycle")
        if self.shape_basis is not None and self.shape_basis.shape[:2] != (v, 3):
            raise ValueError("shape_basis must be (V, 3, S)")
        if self.joint_regressor is not None and self.joint_regressor.shape != (j, v):
            raise ValueError("joint_regressor must be (J, V)")


@dataclass(frozen=True)
class Pose:
    """Per-frame body configuration: joint rotations, root translation, shape."""

    theta: np.ndarray                 # (J, 3) axis-angle
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @staticmethod
    def rest(bundle: BodyBundle) -> "Pose":
        return Pose(theta=np.zeros((bundle.num_joints, 3)))


@dataclass(frozen=True)
class PosedMesh:
    """A posed body plus the rotation data the splat deformer needs."""

    vertices: np.ndarray                   # (V, 3)
    vertex_normals: np.ndarray             # (V, 3) unit
    triangle_quats: np.ndarray             # (F, 4) canonical->posed rotation
    triangle_areas_posed: np.ndarray       # (F,)
    triangle_areas_canonical: np.ndarray   # (F,)
    vertex_quats: np.ndarray               # (V, 4)


@dataclass(frozen=True)
class JointTriSet:
    """Faces lying within a fixed distance of any joint (rest pose)."""

    member_faces: np.ndarray  # sorted unique face indices
    mask: np.ndarray          # (F,) bool

    def __contains__(self, face_index: int) -> bool:
        return bool(self.mask[face_index])

    def __len__(self) -> int:
        return int(self.member_faces.shape[0])


# ---------------------------------------------------------------------------
# mesh helpers


def face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (cross of the two edges), length = 2*area."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    return np.cross(v1 - v0, v2 - v0)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(vertices, faces), axis=-1)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex unit normals."""
    cross = face_cross(vertices, faces)
    acc = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(acc, faces[:, c], cross)
    return normalize(acc)


def triangle_frames(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-face right-handed orthonormal frames, columns (e1_hat, n, e1_hat x n).

    Raises DegenerateGeometryError when any face has (near-)zero area.
    """
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    cross = np.cross(e1, vertices[faces[:, 2]] - v0)
    area2 = np.linalg.norm(cross, axis=-1)
    if np.any(area2 <= 2.0 * _AREA_EPS):
        raise DegenerateGeometryError("degenerate triangle (area ~ 0)")
    b0 = normalize(e1)
    b1 = cross / area2[:, None]
    b2 = np.cross(b0, b1)
    return np.stack([b0, b1, b2], axis=-1)


def triangle_rotations(cano_vertices: np.ndarray, posed_vertices: np.ndarray,
                       faces: np.ndarray) -> np.ndarray:
    """Unit quaternions (w >= 0) rotating each canonical face frame to its posed frame."""
    fc = triangle_frames(cano_vertices, faces)
    fp = triangle_frames(posed_vertices, faces)
    rot = fp @ np.swapaxes(fc, -1, -2)
    return mat_to_quat(rot)


def vertex_quaternions(triangle_quats: np.ndarray, triangle_areas: np.ndarray,
                       faces: np.ndarray, num_vertices: int) -> np.ndarray:
    """Area-weighted per-vertex average of adjacent face quaternions.

    Each vertex's adjacent quats are hemisphere-aligned to its lowest-index
    adjacent face before the weighted sum, then the sum is renormalized;
    the result is therefore independent of face ordering.
    """
    first_face = np.full(num_vertices, np.iinfo(np.int64).max, dtype=np.int64)
    fidx = np.repeat(np.arange(faces.shape[0], dtype=np.int64), 3)
    np.minimum.at(first_face, faces.ravel(), fidx)
    if np.any(first_face == np.iinfo(np.int64).max):
        raise ValueError("isolated vertex: no adjacent face to average over")

    ref = triangle_quats[first_face]              # (V, 4)
    acc = np.zeros((num_vertices, 4))
    for c in range(3):
        vids = faces[:, c]
        q = triangle_quats
        dot = np.einsum("fk,fk->f", q, ref[vids])
        sign = np.where(dot < 0.0, -1.0, 1.0)
        np.add.at(acc, vids, (sign * triangle_areas)[:, None] * q)
    norms = np.linalg.norm(acc, axis=-1)
    if np.any(norms <= 1e-12):
        raise DegenerateGeometryError("vertex quaternion average vanished")
    return acc / norms[:, None]


# ---------------------------------------------------------------------------
# posing


def canonical_vertices(bundle: BodyBundle, beta: np.ndarray | None = None) -> np.ndarray:
    """Rest vertices displaced along the shape basis by beta."""
    v = bundle.rest_vertices
    if beta is None or beta.size == 0:
        return np.array(v)
    if bundle.shape_basis is None:
        raise ValueError("pose has shape coefficients but bundle has no shape basis")
    if beta.shape != (bundle.num_shape_coeffs,):
        raise ValueError("beta length does not match shape basis")
    return v + bundle.shape_basis @ beta


def _forward_kinematics(bundle: BodyBundle, joints: np.ndarray,
                        theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World transforms per joint: returns (rotations (J,3,3), translations (J,3))."""
    j = bundle.num_joints
    rots = axis_angle_to_mat(theta)
    g_rot = np.empty((j, 3, 3))
    g_t = np.empty((j, 3))
    order = _topological_joint_order(bundle.kinematic_parents)
    for jj in order:
        p = int(bundle.kinematic_parents[jj])
        if p < 0:
            g_rot[jj] = rots[jj]
            g_t[jj] = joints[jj]
        else:
            g_rot[jj] = g_rot[p] @ rots[jj]
            g_t[jj] = g_rot[p] @ (joints[jj] - joints[p]) + g_t[p]
    return g_rot, g_t


def _topological_joint_order(parents: np.ndarray) -> list[int]:
    order, placed = [], np.zeros(len(parents), dtype=bool)
    pending = list(range(len(parents)))
    while pending:
        rest = []
        for jj in pending:
            p = int(parents[jj])
            if p < 0 or placed[p]:
                order.append(jj)
                placed[jj] = True
            else:
                rest.append(jj)
        if len(rest) == len(pending):
            raise ValueError("kinematic parents do not form a tree")
        pending = rest
    return order


def lbs_pose(bundle: BodyBundle, pose: Pose) -> PosedMesh:
    """Pose the body by linear blend skinning and derive deformer rotation data.

    Vertices: v' = sum_j w_vj * G_j(theta) * (v_shaped - j_j) + translation,
    with G_j composed along the kinematic chain.  Triangle/vertex quaternions
    describe the canonical(shaped)->posed rotation per face / per vertex.
    """
    if pose.theta.shape != (bundle.num_joints, 3):
        raise ValueError("pose.theta must be (J, 3)")
    v_cano = canonical_vertices(bundle, pose.beta)
    if bundle.joint_regressor is not None:
        joints = bundle.joint_regressor @ v_cano
    else:
        joints = bundle.joint_rest_positions

    g_rot, g_t = _forward_kinematics(bundle, joints, pose.theta)
    # skinning transform: x -> G_rot x + (G_t - G_rot j)  (rest joint pinned)
    a_t = g_t - np.einsum("jab,jb->ja", g_rot, joints)

    w = bundle.skin_weights
    m_rot = np.einsum("vj,jab->vab", w, g_rot)
    m_t = w @ a_t
    verts = np.einsum("vab,vb->va", m_rot, v_cano) + m_t + pose.translation

    tri_quats = triangle_rotations(v_cano, verts, bundle.faces)
    areas_posed = face_areas(verts, bundle.faces)
    areas_cano = face_areas(v_cano, bundle.faces)
    vquats = vertex_quaternions(tri_quats, areas_posed, bundle.faces, bundle.num_vertices)
    return PosedMesh(
        vertices=verts,
        vertex_normals=vertex_normals(verts, bundle.faces),
        triangle_quats=tri_quats,
        triangle_areas_posed=areas_posed,
        triangle_areas_canonical=areas_cano,
        vertex_quats=vquats,
    )


def joint_tri_set(bundle: BodyBundle, radius: float = 0.1) -> JointTriSet:
    """Faces whose rest-pose centroid lies within `radius` of any joint."""
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    centroids = bundle.rest_vertices[bundle.faces].mean(axis=1)      # (F, 3)
    d2 = ((centroids[:, None, :] - bundle.joint_rest_positions[None, :, :]) ** 2).sum(-1)
    mask = (d2.min(axis=1) <= radius * radius)
    return JointTriSet(member_faces=np.flatnonzero(mask), mask=mask)


# ---------------------------------------------------------------------------
# procedural test body


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def make_mini_body(n_joints: int = 3, ring_verts: int = 12, rings_per_bone: int = 6,
                   bone_length: float = 0.25, radius: float = 0.06,
                   jitter: float = 0.01, seed: int = 0) -> BodyBundle:
    """Procedural articulated cylinder along +y for tests.

    One bone per joint, stacked end to end; capped tube surface; smooth skin
    weights that split 50/50 at each interior joint.  Deterministic per seed.
    """
    if n_joints < 1:
        raise ValueError("need at least one joint")
    rng = np.random.default_rng(seed)
    total = n_joints * bone_length
    n_rings = n_joints * rings_per_bone + 1
    ys = np.linspace(0.0, total, n_rings)
    ang = np.linspace(0.0, 2.0 * np.pi, ring_verts, endpoint=False)

    # slight taper + seeded radial jitter so no two faces are exactly congruent
    taper = 1.0 - 0.2 * ys / total
    rr = radius * taper[:, None] * (1.0 + jitter * rng.standard_normal((n_rings, ring_verts)))
    xs = rr * np.cos(ang)[None, :]
    zs = rr * np.sin(ang)[None, :]
    ring_pts = np.stack([xs, np.broadcast_to(ys[:, None], xs.shape), zs], axis=-1)
    verts = ring_pts.reshape(-1, 3)
    bot_center = np.array([[0.0, 0.0, 0.0]])
    top_center = np.array([[0.0, total, 0.0]])
    verts = np.concatenate([verts, bot_center, top_center], axis=0)
    i_bot, i_top = len(verts) - 2, len(verts) - 1

    faces = []
    for i in range(n_rings - 1):
        for k in range(ring_verts):
            a = i * ring_verts + k
            b = i * ring_verts + (k + 1) % ring_verts
            c = a + ring_verts
            d = b + ring_verts
            faces.append((a, b, d))   # outward winding (counterclockwise seen from outside)
            faces.append((a, d, c))
    for k in range(ring_verts):           # bottom cap, normal -y
        a = k
        b = (k + 1) % ring_verts
        faces.append((i_bot, b, a))
    top0 = (n_rings - 1) * ring_verts
    for k in range(ring_verts):           # top cap, normal +y
        a = top0 + k
        b = top0 + (k + 1) % ring_verts
        faces.append((i_top, a, b))
    faces = np.asarray(faces, dtype=np.int64)

    joints = np.stack([np.zeros(n_joints), np.arange(n_joints) * bone_length,
                       np.zeros(n_joints)], axis=-1)
    parents = np.arange(-1, n_joints - 1, dtype=np.int64)

    # smooth bone weights over height: 50/50 exactly at each interior joint
    h = 0.3 * bone_length
    y_all = verts[:, 1]
    w = np.ones((len(verts), n_joints))
    for j in range(n_joints):
        if j > 0:
            w[:, j] *= _smoothstep((y_all - (joints[j, 1] - h)) / (2.0 * h))
        if j < n_joints - 1:
            w[:, j] *= 1.0 - _smoothstep((y_all - (joints[j + 1, 1] - h)) / (2.0 * h))
    w /= w.sum(axis=1, keepdims=True)

    bundle = BodyBundle(
        rest_vertices=verts,
        faces=faces,
        joint_rest_positions=joints,
        kinematic_parents=parents,
        skin_weights=w,
    )
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# on-disk format


def save_body(bundle: BodyBundle, out_dir: str) -> None:
    """Write body.json + body.bin (little-endian f4/i4, manifest-ordered)."""
    os.makedirs(out_dir, exist_ok=True)
    fields = [
        ("rest_vertices", bundle.rest_vertices, "f4"),
        ("faces", bundle.faces, "i4"),
        ("joint_rest_positions", bundle.joint_rest_positions, "f4"),
        ("kinematic_parents", bundle.kinematic_parents, "i4"),
        ("skin_weights", bundle.skin_weights, "f4"),
    ]
    if bundle.shape_basis is not None:
        fields.append(("shape_basis", bundle.shape_basis, "f4"))
    if bundle.joint_regressor is not None:
        fields.append(("joint_regressor", bundle.joint_regressor, "f4"))
    blob, entries = serial.pack_fields(fields)
    manifest = {
        "version": 1,
        "V": bundle.num_vertices,
        "F": bundle.num_faces,
        "J": bundle.num_joints,
        "S": bundle.num_shape_coeffs,
        "fields": entries,
    }
    serial.write_blob(os.path.join(out_dir, "body.bin"), blob)
    serial.write_json(os.path.join(out_dir, "body.json"), manifest)


def load_body(in_dir: str) -> BodyBundle:
    manifest = serial.read_json(os.path.join(in_dir, "body.json"))
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported body bundle version: {manifest.get('version')!r}")
    blob = serial.read_blob(os.path.join(in_dir, "body.bin"))
    arrays = serial.unpack_fields(blob, manifest["fields"])
    # skin weights are renormalized after the 32-bit cast so rows sum to 1 exactly
    weights = arrays["skin_weights"]
    weights = weights / weights.sum(axis=1, keepdims=True)
    bundle = BodyBundle(
        rest_vertices=arrays["rest_vertices"],
        faces=arrays["faces"],
        joint_rest_positions=arrays["joint_rest_positions"],
        kinematic_parents=arrays["kinematic_parents"],
        skin_weights=weights,
        shape_basis=arrays.get("shape_basis"),
        joint_regressor=arrays.get("joint_regressor"),
    )
    bundle.validate()
    return bundle


def bundle_hash(bundle: BodyBundle) -> str:
    """Stable content hash of the 32-bit on-disk representation."""
    fields = [
        ("rest_vertices", bundle.rest_vertices, "f4"),
        ("faces", bundle.faces, "i4"),
        ("joint_rest_positions", bundle.joint_rest_positions, "f4"),
        ("kinematic_parents", bundle.kinematic_parents, "i4"),
        ("skin_weights", bundle.skin_weights, "f4"),
    ]
    blob, _ = serial.pack_fields(fields)
    return serial.sha256_hex(blob)

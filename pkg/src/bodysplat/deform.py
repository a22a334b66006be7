"""Canonical -> posed deformation of splats.

Each splat's center is re-evaluated on its posed host triangle (same
barycentric coordinates and normal offset), its rotation is composed as
comp * dq * q with dq the barycentric blend of the posed per-vertex
quaternions, and its scales are multiplied by the posed/canonical area
ratio of the host face.

Three faces of the same math live here:
  - deform_avatar / deform_arrays: vectorized forward with a context record
  - deform_backward: hand-derived adjoints for all optimizable inputs
  - deform_splat_tape: scalar tape re-derivation of the full chain (posed
    positions -> frames -> quaternions -> splat), used as an independent
    oracle and for checking gradients w.r.t. posed vertex positions
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import BodyBundle, PosedMesh, face_areas, triangle_frames
from .embedding import AvatarModel, SplatEmbedding
from .quatgeom import DegenerateGeometryError, quat_mul
from .tape import Tape, Var

_AREA_EPS = 1e-12


@dataclass(frozen=True)
class PosedSplat:
    """One world-space surfel ready for rasterization."""

    center: np.ndarray   # (3,)
    rot: np.ndarray      # (4,)
    scale: np.ndarray    # (2,)
    opacity: float
    sh: np.ndarray       # (9, 3)
    source: int          # index into the avatar's splat list


@dataclass
class PosedSplatBatch:
    """All deformed splats, field-major."""

    center: np.ndarray   # (N, 3)
    rot: np.ndarray      # (N, 4)
    scale: np.ndarray    # (N, 2)
    opacity: np.ndarray  # (N,)
    sh: np.ndarray       # (N, 9, 3)
    source: np.ndarray = None   # (N,) originating splat index, optional

    @property
    def count(self) -> int:
        return int(self.center.shape[0])

    def splat(self, i: int) -> PosedSplat:
        return PosedSplat(
            center=np.array(self.center[i]), rot=np.array(self.rot[i]),
            scale=np.array(self.scale[i]), opacity=float(self.opacity[i]),
            sh=np.array(self.sh[i]),
            source=int(self.source[i]) if self.source is not None else i,
        )


@dataclass
class DeformCtx:
    """Forward intermediates needed by deform_backward."""

    tri_v: np.ndarray       # (N, 3, 3) posed host-triangle vertices
    tri_n: np.ndarray       # (N, 3, 3) posed host-triangle vertex normals
    n_hat: np.ndarray       # (N, 3)
    n_len: np.ndarray       # (N,)
    offset: np.ndarray      # (N,)
    q_aligned: np.ndarray   # (N, 3, 4) hemisphere-aligned vertex quats
    blend: np.ndarray       # (N, 4) raw dq blend
    blend_len: np.ndarray   # (N,)
    dq: np.ndarray          # (N, 4)
    ds: np.ndarray          # (N,)
    comp: np.ndarray        # (N, 4)
    inner: np.ndarray       # (N, 4)  comp * dq
    rot_param: np.ndarray   # (N, 4)  q_i
    scale_param: np.ndarray  # (N, 2) s_i


def _quat_lmat(a: np.ndarray) -> np.ndarray:
    """Matrix L(a) with a*q == L(a) @ q, shape (..., 4, 4)."""
    w, x, y, z = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    m = np.empty(a.shape[:-1] + (4, 4))
    m[..., 0, 0], m[..., 0, 1], m[..., 0, 2], m[..., 0, 3] = w, -x, -y, -z
    m[..., 1, 0], m[..., 1, 1], m[..., 1, 2], m[..., 1, 3] = x, w, -z, y
    m[..., 2, 0], m[..., 2, 1], m[..., 2, 2], m[..., 2, 3] = y, z, w, -x
    m[..., 3, 0], m[..., 3, 1], m[..., 3, 2], m[..., 3, 3] = z, -y, x, w
    return m


def _quat_rmat(b: np.ndarray) -> np.ndarray:
    """Matrix R(b) with q*b == R(b) @ q, shape (..., 4, 4)."""
    w, x, y, z = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    m = np.empty(b.shape[:-1] + (4, 4))
    m[..., 0, 0], m[..., 0, 1], m[..., 0, 2], m[..., 0, 3] = w, -x, -y, -z
    m[..., 1, 0], m[..., 1, 1], m[..., 1, 2], m[..., 1, 3] = x, w, z, -y
    m[..., 2, 0], m[..., 2, 1], m[..., 2, 2], m[..., 2, 3] = y, -z, w, x
    m[..., 3, 0], m[..., 3, 1], m[..., 3, 2], m[..., 3, 3] = z, y, -x, w
    return m


def deform_arrays(bundle: BodyBundle, face: np.ndarray, bary: np.ndarray,
                  offset: np.ndarray, scale: np.ndarray, rot: np.ndarray,
                  opacity: np.ndarray, sh: np.ndarray, posed: PosedMesh,
                  comp: np.ndarray | None = None,
                  ) -> tuple[PosedSplatBatch, DeformCtx]:
    """Vectorized canonical->posed splat transform over raw field arrays."""
    n = face.shape[0]
    if comp is None:
        comp = np.zeros((n, 4))
        comp[:, 0] = 1.0
    else:
        comp = np.asarray(comp, dtype=np.float64)
        if comp.shape != (n, 4):
            raise ValueError(f"comp must be ({n}, 4), got {comp.shape}")

    a_cano = posed.triangle_areas_canonical[face]
    if np.any(a_cano < _AREA_EPS):
        raise DegenerateGeometryError("canonical host-triangle area ~ 0: area ratio undefined")

    tri = bundle.faces[face]                    # (N, 3)
    tri_v = posed.vertices[tri]                 # (N, 3, 3)
    tri_n = posed.vertex_normals[tri]           # (N, 3, 3)
    u = bary[:, 0:1]
    v = bary[:, 1:2]
    w = 1.0 - u - v

    n_raw = u * tri_n[:, 0] + v * tri_n[:, 1] + w * tri_n[:, 2]
    n_len = np.linalg.norm(n_raw, axis=-1)
    if np.any(n_len <= 1e-12):
        raise DegenerateGeometryError("interpolated posed normal vanished")
    n_hat = n_raw / n_len[:, None]
    center = (u * tri_v[:, 0] + v * tri_v[:, 1] + w * tri_v[:, 2]
              + offset[:, None] * n_hat)

    q_v = posed.vertex_quats[tri]               # (N, 3, 4)
    ref = q_v[:, 0]
    s1 = np.where(np.einsum("nk,nk->n", q_v[:, 1], ref) < 0.0, -1.0, 1.0)
    s2 = np.where(np.einsum("nk,nk->n", q_v[:, 2], ref) < 0.0, -1.0, 1.0)
    q_aligned = np.stack([ref, s1[:, None] * q_v[:, 1], s2[:, None] * q_v[:, 2]], axis=1)
    blend = (u * q_aligned[:, 0] + v * q_aligned[:, 1] + w * q_aligned[:, 2])
    blend_len = np.linalg.norm(blend, axis=-1)
    if np.any(blend_len <= 1e-12):
        raise DegenerateGeometryError("vertex-quaternion blend vanished")
    dq = blend / blend_len[:, None]

    ds = posed.triangle_areas_posed[face] / a_cano
    inner = quat_mul(comp, dq)
    rot_out = quat_mul(inner, rot)
    scale_out = ds[:, None] * scale

    batch = PosedSplatBatch(
        center=center, rot=rot_out, scale=scale_out,
        opacity=opacity.copy(), sh=sh.copy(),
        source=np.arange(n, dtype=np.int64),
    )
    ctx = DeformCtx(
        tri_v=tri_v, tri_n=tri_n, n_hat=n_hat, n_len=n_len, offset=offset.copy(),
        q_aligned=q_aligned, blend=blend, blend_len=blend_len, dq=dq, ds=ds,
        comp=comp, inner=inner, rot_param=rot.copy(), scale_param=scale.copy(),
    )
    return batch, ctx


def deform_avatar(model: AvatarModel, posed: PosedMesh,
                  comp: np.ndarray | None = None,
                  ) -> tuple[PosedSplatBatch, DeformCtx]:
    """Deform every splat of the avatar; order preserved."""
    if comp is not None and np.asarray(comp).shape[0] != model.count:
        raise ValueError("comp list length does not match splat count")
    return deform_arrays(
        model.bundle, model.face, model.bary, model.offset, model.scale,
        model.rot, model.opacity, model.sh, posed, comp,
    )


def deform_splat(e: SplatEmbedding, posed: PosedMesh, bundle: BodyBundle,
                 comp: np.ndarray | None = None) -> PosedSplat:
    """Single-splat convenience wrapper over deform_arrays."""
    batch, _ = deform_arrays(
        bundle,
        np.array([e.face_index], dtype=np.int64),
        np.asarray(e.bary, dtype=np.float64)[None, :],
        np.array([e.offset]),
        np.asarray(e.scale, dtype=np.float64)[None, :],
        np.asarray(e.rot, dtype=np.float64)[None, :],
        np.array([e.opacity]),
        np.asarray(e.sh, dtype=np.float64)[None, :, :],
        posed,
        None if comp is None else np.asarray(comp, dtype=np.float64)[None, :],
    )
    return batch.splat(0)


def deform_backward(ctx: DeformCtx, g_center: np.ndarray, g_rot: np.ndarray,
                    g_scale: np.ndarray, g_opacity: np.ndarray, g_sh: np.ndarray,
                    ) -> dict[str, np.ndarray]:
    """Adjoints of deform_arrays w.r.t. the optimizable inputs.

    Returns gradients for bary (N,2), offset (N,), scale (N,2), rot (N,4),
    opacity (N,), sh (N,9,3), and comp (N,4).  Mesh-derived quantities
    (vertex quats, areas, normals) are inputs, not parameters, so no
    gradients flow to them here; the tape reference covers that direction.
    """
    # rotation chain: rot_out = (comp * dq) * q_i
    g_qi = np.einsum("nij,ni->nj", _quat_lmat(ctx.inner), g_rot)
    g_inner = np.einsum("nij,ni->nj", _quat_rmat(ctx.rot_param), g_rot)
    g_comp = np.einsum("nij,ni->nj", _quat_rmat(ctx.dq), g_inner)
    g_dq = np.einsum("nij,ni->nj", _quat_lmat(ctx.comp), g_inner)
    # dq = blend / |blend|
    proj = g_dq - ctx.dq * np.einsum("nk,nk->n", ctx.dq, g_dq)[:, None]
    g_blend = proj / ctx.blend_len[:, None]
    qa = ctx.q_aligned
    g_u = np.einsum("nk,nk->n", g_blend, qa[:, 0] - qa[:, 2])
    g_v = np.einsum("nk,nk->n", g_blend, qa[:, 1] - qa[:, 2])

    # center chain: c = sum b_i v_i + d * n_hat,  n_hat = n_raw / |n_raw|
    g_d = np.einsum("nk,nk->n", g_center, ctx.n_hat)
    g_nhat = ctx.offset[:, None] * g_center
    g_nraw = (g_nhat - ctx.n_hat * np.einsum("nk,nk->n", ctx.n_hat, g_nhat)[:, None]
              ) / ctx.n_len[:, None]
    tv, tn = ctx.tri_v, ctx.tri_n
    g_u += (np.einsum("nk,nk->n", g_center, tv[:, 0] - tv[:, 2])
            + np.einsum("nk,nk->n", g_nraw, tn[:, 0] - tn[:, 2]))
    g_v += (np.einsum("nk,nk->n", g_center, tv[:, 1] - tv[:, 2])
            + np.einsum("nk,nk->n", g_nraw, tn[:, 1] - tn[:, 2]))

    return {
        "bary": np.stack([g_u, g_v], axis=-1),
        "offset": g_d,
        "scale": ctx.ds[:, None] * g_scale,
        "rot": g_qi,
        "opacity": g_opacity.copy(),
        "sh": g_sh.copy(),
        "comp": g_comp,
    }


# ---------------------------------------------------------------------------
# scalar tape reference (independent oracle + posed-vertex gradients)


def _tv_sub(a, b):
    return [a[i] - b[i] for i in range(len(a))]


def _tv_dot(a, b):
    out = a[0] * b[0]
    for i in range(1, len(a)):
        out = out + a[i] * b[i]
    return out


def _tv_cross(a, b):
    return [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]


def _tv_norm(a):
    return _tv_dot(a, a).sqrt()


def _tv_scale(a, s):
    return [x * s for x in a]


def _tv_sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def _tq_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return [
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ]


def _t_mat_to_quat(m):
    """Tape version of mat_to_quat; branch and sign picked from values."""
    def val(x):
        return x.value if isinstance(x, Var) else float(x)

    tw = 1.0 + m[0][0] + m[1][1] + m[2][2]
    tx = 1.0 + m[0][0] - m[1][1] - m[2][2]
    ty = 1.0 - m[0][0] + m[1][1] - m[2][2]
    tz = 1.0 - m[0][0] - m[1][1] + m[2][2]
    cands = [tw, tx, ty, tz]
    branch = max(range(4), key=lambda i: val(cands[i]))
    s = cands[branch].sqrt() * 2.0
    if branch == 0:
        q = [s * 0.25, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s,
             (m[1][0] - m[0][1]) / s]
    elif branch == 1:
        q = [(m[2][1] - m[1][2]) / s, s * 0.25, (m[0][1] + m[1][0]) / s,
             (m[0][2] + m[2][0]) / s]
    elif branch == 2:
        q = [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, s * 0.25,
             (m[1][2] + m[2][1]) / s]
    else:
        q = [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s,
             (m[1][2] + m[2][1]) / s, s * 0.25]
    norm = _tv_norm(q)
    q = [c / norm for c in q]
    if val(q[0]) < 0.0:
        q = [c * -1.0 for c in q]
    return q


def deform_cone(bundle: BodyBundle, face_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Dependency cone of one splat: (faces adjacent to its host vertices,
    all vertex ids those faces touch)."""
    host = bundle.faces[face_index]
    in_cone = np.isin(bundle.faces, host).any(axis=1)
    cone_faces = np.flatnonzero(in_cone)
    vids = np.unique(bundle.faces[cone_faces])
    return cone_faces, vids


def deform_splat_tape(tape: Tape, bundle: BodyBundle, cano_vertices: np.ndarray,
                      posed_pos: dict[int, list], params: dict,
                      ) -> dict[str, list]:
    """Scalar re-derivation of the deform chain for one splat on a tape.

    posed_pos maps vertex id -> [x, y, z] Vars for every vertex in the
    splat's dependency cone (see deform_cone).  params holds Vars "u", "v",
    "d", "s0", "s1", "q" (4 Vars) and optionally "comp" (4 Vars); the face
    index rides along as params["face"].  Recomputes posed areas, frames,
    triangle/vertex quaternions, and vertex normals from the raw positions,
    exactly mirroring the vectorized pipeline, then deforms.

    Returns {"center": 3 Vars, "rot": 4 Vars, "scale": 2 Vars}.
    """
    k = int(params["face"])
    cone_faces, _ = deform_cone(bundle, k)
    faces = bundle.faces
    cano_frames = triangle_frames(cano_vertices, faces)
    cano_area = face_areas(cano_vertices, faces)

    tri_quat: dict[int, list] = {}
    tri_area: dict[int, object] = {}
    tri_cross: dict[int, list] = {}
    for f in cone_faces:
        p0, p1, p2 = (posed_pos[int(faces[f, c])] for c in range(3))
        e1 = _tv_sub(p1, p0)
        cross = _tv_cross(e1, _tv_sub(p2, p0))
        cross_len = _tv_norm(cross)
        tri_cross[f] = cross
        tri_area[f] = cross_len * 0.5
        b0 = _tv_scale(e1, 1.0 / _tv_norm(e1))
        b1 = _tv_scale(cross, 1.0 / cross_len)
        b2 = _tv_cross(b0, b1)
        fc = cano_frames[f]                     # constant, columns (b0, b1, b2)
        # R = F_pose @ F_cano^T with F_pose columns b0,b1,b2
        fp_cols = [b0, b1, b2]
        rot_m = [[_tv_sum([fp_cols[c][i] * fc[j, c] for c in range(3)]) for j in range(3)]
                 for i in range(3)]
        tri_quat[f] = _t_mat_to_quat(rot_m)

    host = [int(x) for x in faces[k]]
    vert_quat: dict[int, list] = {}
    vert_normal: dict[int, list] = {}
    for vid in host:
        adj = [int(f) for f in cone_faces if vid in faces[f]]
        ref = tri_quat[min(adj)]
        acc_q = [tape.var(0.0) for _ in range(4)]
        acc_n = [tape.var(0.0) for _ in range(3)]
        for f in adj:
            q = tri_quat[f]
            dot_val = sum(q[i].value * ref[i].value for i in range(4))
            sign = -1.0 if dot_val < 0.0 else 1.0
            wgt = tri_area[f] * sign
            acc_q = [acc_q[i] + q[i] * wgt for i in range(4)]
            acc_n = [acc_n[i] + tri_cross[f][i] for i in range(3)]
        qn = _tv_norm(acc_q)
        vert_quat[vid] = [c / qn for c in acc_q]
        nn = _tv_norm(acc_n)
        vert_normal[vid] = [c / nn for c in acc_n]

    u, v, d = params["u"], params["v"], params["d"]
    w = 1.0 - u - v
    bw = [u, v, w]
    n_raw = [_tv_sum([bw[c] * vert_normal[host[c]][i] for c in range(3)]) for i in range(3)]
    n_len = _tv_norm(n_raw)
    n_hat = [c / n_len for c in n_raw]
    center = [
        _tv_sum([bw[c] * posed_pos[host[c]][i] for c in range(3)]) + d * n_hat[i]
        for i in range(3)
    ]

    q0 = vert_quat[host[0]]
    aligned = [q0]
    for c in (1, 2):
        qc = vert_quat[host[c]]
        dot_val = sum(qc[i].value * q0[i].value for i in range(4))
        sign = -1.0 if dot_val < 0.0 else 1.0
        aligned.append([x * sign for x in qc])
    blend = [_tv_sum([bw[c] * aligned[c][i] for c in range(3)]) for i in range(4)]
    bl = _tv_norm(blend)
    dq = [c / bl for c in blend]

    comp = params.get("comp")
    if comp is None:
        comp = [1.0, 0.0, 0.0, 0.0]
    rot = _tq_mul(_tq_mul(comp, dq), params["q"])
    ds = tri_area[k] / float(cano_area[k])
    scale = [params["s0"] * ds, params["s1"] * ds]
    return {"center": center, "rot": rot, "scale": scale}

"""Rotation compensation network.

Predicts a small residual rotation per splat from (a) a learned per-face
feature, the splat's local coordinates, and its canonical rotation, and
(b) the global pose vector.  The decoder's final affine layer starts at
zero, so at initialization the output is exactly the identity quaternion
and the network is a render-level no-op.

All layers are plain affine + tanh, implemented directly on numpy arrays
with a hand-written backward pass.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from . import serial
from .embedding import SplatEmbedding

GEO_FEAT = 256
GEO_IN_EXTRA = 7          # u, v, d + 4 rotation components
GEO_HIDDEN = 256
GEO_OUT = 128
POSE_HIDDEN = 128
POSE_OUT = 64
DEC_HIDDEN = 128
_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class RcnParams:
    """All learnable tensors; field order is the on-disk tensor order."""

    tri_embed: np.ndarray     # (F, 256)
    enc_geo_w1: np.ndarray    # (256, 263)
    enc_geo_b1: np.ndarray    # (256,)
    enc_geo_w2: np.ndarray    # (128, 256)
    enc_geo_b2: np.ndarray    # (128,)
    enc_pose_w1: np.ndarray   # (128, P)
    enc_pose_b1: np.ndarray   # (128,)
    enc_pose_w2: np.ndarray   # (64, 128)
    enc_pose_b2: np.ndarray   # (64,)
    dec_w1: np.ndarray        # (128, 192)
    dec_b1: np.ndarray        # (128,)
    dec_w2: np.ndarray        # (4, 128)  zero at init
    dec_b2: np.ndarray        # (4,)      zero at init

    @property
    def pose_dim(self) -> int:
        return self.enc_pose_w1.shape[1]

    @property
    def num_faces(self) -> int:
        return self.tri_embed.shape[0]

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self) -> "RcnParams":
        return RcnParams(**{k: v.copy() for k, v in self.tensor_items()})


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_rcn(num_faces: int, pose_dim: int, seed: int = 0) -> RcnParams:
    """Fresh parameters; decoder output layer zeroed (identity residual)."""
    rng = np.random.default_rng(seed)
    geo_in = GEO_IN_EXTRA + GEO_FEAT
    return RcnParams(
        tri_embed=rng.normal(0.0, 0.1, size=(num_faces, GEO_FEAT)),
        enc_geo_w1=_xavier(rng, GEO_HIDDEN, geo_in),
        enc_geo_b1=np.zeros(GEO_HIDDEN),
        enc_geo_w2=_xavier(rng, GEO_OUT, GEO_HIDDEN),
        enc_geo_b2=np.zeros(GEO_OUT),
        enc_pose_w1=_xavier(rng, POSE_HIDDEN, pose_dim),
        enc_pose_b1=np.zeros(POSE_HIDDEN),
        enc_pose_w2=_xavier(rng, POSE_OUT, POSE_HIDDEN),
        enc_pose_b2=np.zeros(POSE_OUT),
        dec_w1=_xavier(rng, DEC_HIDDEN, GEO_OUT + POSE_OUT),
        dec_b1=np.zeros(DEC_HIDDEN),
        dec_w2=np.zeros((4, DEC_HIDDEN)),
        dec_b2=np.zeros(4),
    )


@dataclass
class RcnCtx:
    """Forward activations kept for the backward pass."""

    face: np.ndarray      # (N,)
    geo_in: np.ndarray    # (N, 263)
    h1_geo: np.ndarray    # (N, 256) post-tanh
    x_geo: np.ndarray     # (N, 128) post-tanh
    theta: np.ndarray     # (P,)
    h1_pose: np.ndarray   # (128,)
    x_pose: np.ndarray    # (64,)
    h1_dec: np.ndarray    # (N, 128) post-tanh
    pre: np.ndarray       # (N, 4) raw + identity
    pre_len: np.ndarray   # (N,)
    out: np.ndarray       # (N, 4)


def rcn_forward(params: RcnParams, face: np.ndarray, bary: np.ndarray,
                offset: np.ndarray, rot: np.ndarray, theta_flat: np.ndarray,
                ) -> tuple[np.ndarray, RcnCtx]:
    """Compensation quaternions for a batch of splats under one pose.

    Returns (unit quats (N, 4), context for rcn_backward).
    """
    theta_flat = np.asarray(theta_flat, dtype=np.float64).ravel()
    if theta_flat.shape[0] != params.pose_dim:
        raise ValueError(f"pose vector has {theta_flat.shape[0]} entries, "
                         f"network expects {params.pose_dim}")
    n = face.shape[0]
    geo_in = np.concatenate(
        [bary, offset[:, None], params.tri_embed[face], rot], axis=1
    )
    h1_geo = np.tanh(geo_in @ params.enc_geo_w1.T + params.enc_geo_b1)
    x_geo = np.tanh(h1_geo @ params.enc_geo_w2.T + params.enc_geo_b2)

    h1_pose = np.tanh(params.enc_pose_w1 @ theta_flat + params.enc_pose_b1)
    x_pose = np.tanh(params.enc_pose_w2 @ h1_pose + params.enc_pose_b2)

    dec_in = np.concatenate([x_geo, np.broadcast_to(x_pose, (n, POSE_OUT))], axis=1)
    h1_dec = np.tanh(dec_in @ params.dec_w1.T + params.dec_b1)
    raw = h1_dec @ params.dec_w2.T + params.dec_b2

    pre = raw + _IDENTITY
    pre_len = np.linalg.norm(pre, axis=-1)
    out = pre / pre_len[:, None]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite activation in compensation network")
    return out, RcnCtx(
        face=face.copy(), geo_in=geo_in, h1_geo=h1_geo, x_geo=x_geo,
        theta=theta_flat.copy(), h1_pose=h1_pose, x_pose=x_pose, h1_dec=h1_dec,
        pre=pre, pre_len=pre_len, out=out,
    )


def rcn_forward_splat(params: RcnParams, splat: SplatEmbedding,
                      theta_flat: np.ndarray) -> np.ndarray:
    """Single-splat convenience wrapper; returns one unit quaternion."""
    out, _ = rcn_forward(
        params,
        np.array([splat.face_index], dtype=np.int64),
        np.asarray(splat.bary, dtype=np.float64)[None, :],
        np.array([splat.offset]),
        np.asarray(splat.rot, dtype=np.float64)[None, :],
        theta_flat,
    )
    return out[0]


def rcn_backward(params: RcnParams, ctx: RcnCtx, g_out: np.ndarray,
                 ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Adjoints of rcn_forward.

    Returns (parameter gradients keyed like RcnParams fields, input
    gradients {"bary", "offset", "rot"}).  tri_embed gradients are dense
    (F, 256) but only rows hit by ctx.face are nonzero.
    """
    # normalize: out = pre / |pre|
    g_pre = (g_out - ctx.out * np.einsum("nk,nk->n", ctx.out, g_out)[:, None]
             ) / ctx.pre_len[:, None]

    # decoder
    g_dec_w2 = g_pre.T @ ctx.h1_dec
    g_dec_b2 = g_pre.sum(axis=0)
    g_h1_dec = (g_pre @ params.dec_w2) * (1.0 - ctx.h1_dec ** 2)
    dec_in = np.concatenate(
        [ctx.x_geo, np.broadcast_to(ctx.x_pose, (ctx.x_geo.shape[0], POSE_OUT))], axis=1
    )
    g_dec_w1 = g_h1_dec.T @ dec_in
    g_dec_b1 = g_h1_dec.sum(axis=0)
    g_dec_in = g_h1_dec @ params.dec_w1
    g_x_geo = g_dec_in[:, :GEO_OUT]
    g_x_pose = g_dec_in[:, GEO_OUT:].sum(axis=0)     # pose branch is shared

    # geometry encoder
    g_a2 = g_x_geo * (1.0 - ctx.x_geo ** 2)
    g_geo_w2 = g_a2.T @ ctx.h1_geo
    g_geo_b2 = g_a2.sum(axis=0)
    g_h1_geo = (g_a2 @ params.enc_geo_w2) * (1.0 - ctx.h1_geo ** 2)
    g_geo_w1 = g_h1_geo.T @ ctx.geo_in
    g_geo_b1 = g_h1_geo.sum(axis=0)
    g_geo_in = g_h1_geo @ params.enc_geo_w1

    g_embed = np.zeros_like(params.tri_embed)
    np.add.at(g_embed, ctx.face, g_geo_in[:, 3:3 + GEO_FEAT])

    # pose encoder
    g_p2 = g_x_pose * (1.0 - ctx.x_pose ** 2)
    g_pose_w2 = np.outer(g_p2, ctx.h1_pose)
    g_pose_b2 = g_p2
    g_hp = (params.enc_pose_w2.T @ g_p2) * (1.0 - ctx.h1_pose ** 2)
    # theta is a fixed input; its own gradient is never needed
    g_pose_w1 = np.outer(g_hp, ctx.theta)
    g_pose_b1 = g_hp

    param_grads = {
        "tri_embed": g_embed,
        "enc_geo_w1": g_geo_w1, "enc_geo_b1": g_geo_b1,
        "enc_geo_w2": g_geo_w2, "enc_geo_b2": g_geo_b2,
        "enc_pose_w1": g_pose_w1, "enc_pose_b1": g_pose_b1,
        "enc_pose_w2": g_pose_w2, "enc_pose_b2": g_pose_b2,
        "dec_w1": g_dec_w1, "dec_b1": g_dec_b1,
        "dec_w2": g_dec_w2, "dec_b2": g_dec_b2,
    }
    input_grads = {
        "bary": g_geo_in[:, 0:2],
        "offset": g_geo_in[:, 2],
        "rot": g_geo_in[:, 3 + GEO_FEAT:],
    }
    return param_grads, input_grads


# ---------------------------------------------------------------------------
# checkpoint format


def save_rcn(params: RcnParams, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    blob, entries = serial.pack_fields(
        [(name, arr, "f4") for name, arr in params.tensor_items()]
    )
    manifest = {
        "version": 1,
        "F": params.num_faces,
        "pose_dim": params.pose_dim,
        "fields": entries,
    }
    serial.write_blob(os.path.join(out_dir, "rcn.bin"), blob)
    serial.write_json(os.path.join(out_dir, "rcn.json"), manifest)


def load_rcn(in_dir: str) -> RcnParams:
    manifest = serial.read_json(os.path.join(in_dir, "rcn.json"))
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported network checkpoint version: {manifest.get('version')!r}")
    blob = serial.read_blob(os.path.join(in_dir, "rcn.bin"))
    arrays = serial.unpack_fields(blob, manifest["fields"])
    return RcnParams(**arrays)

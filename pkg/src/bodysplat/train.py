"""Two-stage avatar optimization.

Stage 1 fits splat parameters under plain skinned deformation, with
periodic opacity pruning (density control).  Stage 2 freezes density
control and jointly trains the rotation-correction network.  One
randomly chosen training frame per iteration, Adam from scratch, fully
deterministic for a given seed/config/dataset.

Per iteration: pose the body, deform the splats (with rotation
correction in stage 2), render, evaluate the weighted losses, chain the
analytic backward passes, and apply one Adam update followed by
parameter projection (opacity and scale clamps, quaternion
renormalization) and a triangle walk re-hosting splats whose barycentric
coordinates left their face.
"""

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .body import BodyBundle, bundle_hash, joint_tri_set, lbs_pose
from .data import load_frame
from .deform import deform_avatar, deform_backward
from .embedding import (
    AvatarModel,
    build_adjacency,
    init_splats,
    load_avatar,
    sample_triangles,
    save_avatar,
    walk_splats,
)
from .losses import (
    LossWeights,
    joint_loss,
    joint_loss_backward,
    l1_mse,
    l1_mse_backward,
    normal_loss,
    normal_loss_backward,
    psnr,
    rcn_loss,
    rcn_loss_backward,
    scaling_loss,
    scaling_loss_backward,
    total_loss,
)
from .quatgeom import quat_mul
from .raster import render, render_backward
from .rcn import RcnParams, init_rcn, load_rcn, rcn_backward, rcn_forward, save_rcn
from .serial import (
    dump_json,
    pack_fields,
    read_blob,
    read_json,
    sha256_hex,
    unpack_fields,
    write_blob,
    write_json,
)

CHECKPOINT_VERSION = 1

PARAM_FIELDS = ("bary", "offset", "scale", "rot", "opacity", "sh")

# Per-field learning-rate multipliers: barycentric moves are damped to
# keep face-walk events rare early on; opacity converges slowly at the
# base rate.
LR_SCALE = {"bary": 0.1, "opacity": 5.0}

OPACITY_MIN = 1e-4
OPACITY_MAX = 1.0 - 1e-4
SCALE_MIN = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults match full-scale training."""

    stage1_iters: int = 30000
    stage2_iters: int = 10000
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    prune_opacity: float = 0.005
    prune_interval: int = 500
    stabilization_window: int = 2000
    stabilization_tolerance: float = 0.01
    splat_budget: int = 30000
    n_splats: int = 0            # initial splat count; 0 means the budget
    joint_radius: float = 0.1
    eval_interval: int = 500

    def __post_init__(self):
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        for name in ("learning_rate", "adam_beta1", "adam_beta2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.splat_budget <= 0:
            raise ValueError("splat_budget must be > 0")

    @property
    def initial_splats(self):
        return self.n_splats if self.n_splats > 0 else self.splat_budget

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        w = d.pop("weights", {})
        return cls(weights=LossWeights(**w), **d)


def config_hash(config: TrainConfig) -> str:
    return sha256_hex(dump_json(config.to_dict()).encode("utf-8"))


class Adam:
    """Plain Adam with optional per-tensor learning-rate multipliers."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 lr_scale=None):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.lr_scale = dict(lr_scale or {})
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        """One update; mutates the arrays in `params` in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            step_size = self.lr * self.lr_scale.get(name, 1.0)
            p -= step_size * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def select_rows(self, keep):
        """Keep only the given leading-axis rows of every state tensor."""
        self.m = {k: v[keep].copy() for k, v in self.m.items()}
        self.v = {k: v[keep].copy() for k, v in self.v.items()}

    def state_fields(self, prefix):
        out = [(f"{prefix}.t", np.array([self.t], dtype=np.int64), "i4")]
        for name in sorted(self.m):
            out.append((f"{prefix}.m.{name}", self.m[name], "f4"))
            out.append((f"{prefix}.v.{name}", self.v[name], "f4"))
        return out

    def load_state_fields(self, prefix, tensors):
        self.t = int(tensors[f"{prefix}.t"][0])
        for name in self.m:
            self.m[name] = tensors[f"{prefix}.m.{name}"].astype(np.float64)
            self.v[name] = tensors[f"{prefix}.v.{name}"].astype(np.float64)


@dataclass
class TrainState:
    """Everything mutated across training iterations."""

    bundle: BodyBundle
    config: TrainConfig
    joint_set: object
    adjacency: np.ndarray
    model: AvatarModel
    opt: Adam
    rng: np.random.Generator
    iteration: int = 0
    stage: int = 1
    rcn: RcnParams = None
    opt_rcn: Adam = None
    stabilized: bool = False
    count_history: list = field(default_factory=list)
    out_dir: str = None

    def model_params(self):
        return {name: getattr(self.model, name) for name in PARAM_FIELDS}


def init_state(bundle, config, out_dir=None):
    """Fresh training state: sampled splats, zeroed optimizer, seeded RNG."""
    joint_set = joint_tri_set(bundle, radius=config.joint_radius)
    faces = sample_triangles(bundle, config.initial_splats, joint_set,
                             seed=config.seed)
    model = init_splats(bundle, faces, joint_set, seed=config.seed + 1)
    opt = Adam(
        {name: getattr(model, name) for name in PARAM_FIELDS},
        lr=config.learning_rate, beta1=config.adam_beta1,
        beta2=config.adam_beta2, eps=config.adam_eps, lr_scale=LR_SCALE)
    return TrainState(
        bundle=bundle, config=config, joint_set=joint_set,
        adjacency=build_adjacency(bundle.faces), model=model, opt=opt,
        rng=np.random.default_rng(config.seed),
        count_history=[[0, model.count]], out_dir=out_dir)


def start_stage2(state):
    """Initialize the rotation-correction net and its optimizer."""
    cfg = state.config
    state.stage = 2
    state.rcn = init_rcn(state.bundle.num_faces,
                         pose_dim=state.bundle.num_joints * 3,
                         seed=cfg.seed + 2)
    state.opt_rcn = Adam(
        dict(state.rcn.tensor_items()), lr=cfg.learning_rate,
        beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    return state


def _forward(state, frame):
    """Shared pose->deform->render path for training and evaluation."""
    posed = lbs_pose(state.bundle, frame.pose)
    comp = None
    rctx = None
    if state.stage == 2 and state.rcn is not None:
        comp, rctx = rcn_forward(
            state.rcn, state.model.face, state.model.bary,
            state.model.offset, state.model.rot, frame.pose.theta.ravel())
    batch, dctx = deform_avatar(state.model, posed, comp)
    out = render(batch, frame.camera)
    target = frame.image * frame.mask[..., None]
    return posed, batch, dctx, out, target, comp, rctx


def evaluate_psnr(state, frame):
    """PSNR of the current model against one frame (linear light)."""
    _, _, _, out, target, _, _ = _forward(state, frame)
    return psnr(np.clip(out.color, 0.0, 1.0), target)


def _dump_diagnostics(state, frame, report):
    if state.out_dir is None:
        return None
    path = os.path.join(state.out_dir,
                        "diagnostics_iter%07d.json" % state.iteration)
    norms = {name: float(np.abs(getattr(state.model, name)).max())
             for name in PARAM_FIELDS}
    write_json(path, {
        "iteration": state.iteration,
        "stage": state.stage,
        "frame_id": frame.frame_id,
        "losses": report.to_dict(),
        "param_max_abs": norms,
    })
    return path


def train_step(state, frame):
    """One optimization step on one frame.

    Returns:
        (state, LossReport).

    Raises:
        RuntimeError: non-finite total loss (diagnostics are dumped to
        the state's output directory when one is set).
    """
    cfg = state.config
    wts = cfg.weights
    model = state.model
    posed, batch, dctx, out, target, comp, rctx = _forward(state, frame)

    ones = np.ones(out.alpha.shape, dtype=bool)
    v_l1, v_mse = l1_mse(out.color, target, ones)
    in_joint = state.joint_set.mask[model.face]
    terms = {
        "l1": v_l1,
        "mse": v_mse,
        "scaling": scaling_loss(model.scale, wts.eps_s, wts.eps_r),
        "joint": joint_loss(model.scale, in_joint, wts.tau),
        "normal": normal_loss(out),
    }
    q_lbs = None
    if state.stage == 2:
        q_lbs = quat_mul(dctx.dq, dctx.rot_param)   # skinned-only rotation
        terms["rcn"] = rcn_loss(q_lbs, batch.rot)
    report = total_loss(terms, wts)
    if not np.isfinite(report.total):
        path = _dump_diagnostics(state, frame, report)
        raise RuntimeError(
            "non-finite loss at iteration %d%s"
            % (state.iteration,
               f" (diagnostics: {path})" if path else ""))

    # Backward: image losses -> render -> deform -> parameters.
    g_l1, g_mse = l1_mse_backward(out.color, target, ones)
    g_color = wts.l1 * g_l1 + wts.mse * g_mse
    ups = normal_loss_backward(out)
    rg = render_backward(
        out, g_color=g_color,
        g_alpha=wts.normal * ups["g_alpha"],
        g_depth=wts.normal * ups["g_depth"],
        g_normal=wts.normal * ups["g_normal"])
    g_rot_out = rg["rot"]
    if state.stage == 2:
        # The skinned-only rotation is the (detached) target.
        _, g_cmp = rcn_loss_backward(q_lbs, batch.rot)
        g_rot_out = g_rot_out + wts.rcn * g_cmp
    dg = deform_backward(dctx, rg["center"], g_rot_out, rg["scale"],
                         rg["opacity"], rg["sh"])
    grads = {
        "bary": dg["bary"],
        "offset": dg["offset"],
        "scale": (dg["scale"]
                  + wts.scaling * scaling_loss_backward(
                      model.scale, wts.eps_s, wts.eps_r)
                  + wts.joint * joint_loss_backward(
                      model.scale, in_joint, wts.tau)),
        "rot": dg["rot"],
        "opacity": dg["opacity"],
        "sh": dg["sh"],
    }
    if state.stage == 2:
        p_grads, i_grads = rcn_backward(state.rcn, rctx, dg["comp"])
        grads["bary"] = grads["bary"] + i_grads["bary"]
        grads["offset"] = grads["offset"] + i_grads["offset"]
        grads["rot"] = grads["rot"] + i_grads["rot"]
        state.opt_rcn.step(dict(state.rcn.tensor_items()), p_grads)

    state.opt.step(state.model_params(), grads)

    # Projection back to the valid parameter domain.
    np.clip(model.opacity, OPACITY_MIN, OPACITY_MAX, out=model.opacity)
    np.maximum(model.scale, SCALE_MIN, out=model.scale)
    model.rot /= np.linalg.norm(model.rot, axis=1, keepdims=True)

    # Splats whose barycentric update left the simplex move to the
    # neighboring face, evaluated on this frame's posed mesh.
    model.face, model.bary = walk_splats(
        model.face, model.bary, posed.vertices, state.bundle.faces,
        state.adjacency)

    state.iteration += 1
    return state, report


def density_control(state):
    """Opacity pruning with a floor of one splat per joint-region face.

    Stage 1 only.  Appends to the count history and flips the
    `stabilized` flag once the count change over the stabilization
    window falls under the configured tolerance.
    """
    if state.stage != 1:
        return state
    cfg = state.config
    model = state.model
    keep = model.opacity >= cfg.prune_opacity
    hosted = state.joint_set.mask[model.face]
    for f in np.unique(model.face[hosted]):
        members = np.flatnonzero(model.face == f)
        if not keep[members].any():
            keep[members[np.argmax(model.opacity[members])]] = True
    if not keep.all():
        idx = np.flatnonzero(keep)
        state.model = model.select(idx)
        state.opt.select_rows(idx)
    state.count_history.append([state.iteration, state.model.count])
    window_start = state.iteration - cfg.stabilization_window
    prior = [c for it, c in state.count_history if it <= window_start]
    if prior:
        ref = prior[-1]
        if ref > 0 and abs(state.model.count - ref) < \
                cfg.stabilization_tolerance * ref:
            state.stabilized = True
    return state


def run_training(bundle, manifest, config, out_dir):
    """Run both stages over a dataset; returns the final TrainState.

    Writes `train_log.jsonl` (one JSON object per iteration, no
    timestamps) and a final `checkpoint/` directory under `out_dir`.
    """
    os.makedirs(out_dir, exist_ok=True)
    state = init_state(bundle, config, out_dir=out_dir)
    frames = {fid: load_frame(manifest, fid) for fid in manifest.frame_ids}
    train_ids = list(manifest.train_ids)
    eval_id = manifest.test_ids[0] if manifest.test_ids else train_ids[0]
    total = config.stage1_iters + config.stage2_iters
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        for _ in range(total):
            if state.stage == 1 and state.iteration >= config.stage1_iters:
                start_stage2(state)
            fid = train_ids[int(state.rng.integers(len(train_ids)))]
            state, report = train_step(state, frames[fid])
            entry = {
                "iteration": state.iteration,
                "stage": state.stage,
                "frame": fid,
                "splats": state.model.count,
                "stabilized": state.stabilized,
            }
            entry.update(report.to_dict())
            if (config.eval_interval
                    and state.iteration % config.eval_interval == 0):
                entry["psnr_eval"] = evaluate_psnr(state, frames[eval_id])
            if (state.stage == 1 and config.prune_interval
                    and state.iteration % config.prune_interval == 0):
                density_control(state)
                entry["splats"] = state.model.count
            log.write(json.dumps(entry, sort_keys=True) + "\n")
    save_checkpoint(state, os.path.join(out_dir, "checkpoint"))
    return state


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(state, out_dir):
    """Write avatar, network, optimizer state and counters atomically."""
    os.makedirs(out_dir, exist_ok=True)
    save_avatar(state.model, os.path.join(out_dir, "avatar"),
                bundle_hash(state.bundle))
    fields = state.opt.state_fields("opt")
    if state.rcn is not None:
        save_rcn(state.rcn, os.path.join(out_dir, "rcn"))
        fields += state.opt_rcn.state_fields("opt_rcn")
    blob, entries = pack_fields(fields)
    write_blob(os.path.join(out_dir, "optimizer.bin"), blob)
    write_json(os.path.join(out_dir, "checkpoint.json"), {
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "stage": state.stage,
        "stabilized": state.stabilized,
        "config": state.config.to_dict(),
        "config_hash": config_hash(state.config),
        "rng_state": state.rng.bit_generator.state,
        "count_history": state.count_history,
        "has_rcn": state.rcn is not None,
        "optimizer": entries,
    })


def load_checkpoint(in_dir, bundle):
    """Restore a TrainState written by save_checkpoint.

    Raises:
        ValueError: version mismatch or corrupted tensors.
    """
    meta = read_json(os.path.join(in_dir, "checkpoint.json"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint version %r"
                         % meta.get("version"))
    config = TrainConfig.from_dict(meta["config"])
    model = load_avatar(os.path.join(in_dir, "avatar"), bundle)
    opt = Adam({name: getattr(model, name) for name in PARAM_FIELDS},
               lr=config.learning_rate, beta1=config.adam_beta1,
               beta2=config.adam_beta2, eps=config.adam_eps,
               lr_scale=LR_SCALE)
    tensors = unpack_fields(read_blob(os.path.join(in_dir, "optimizer.bin")),
                            meta["optimizer"])
    opt.load_state_fields("opt", tensors)
    rcn = None
    opt_rcn = None
    if meta.get("has_rcn"):
        rcn = load_rcn(os.path.join(in_dir, "rcn"))
        opt_rcn = Adam(dict(rcn.tensor_items()), lr=config.learning_rate,
                       beta1=config.adam_beta1, beta2=config.adam_beta2,
                       eps=config.adam_eps)
        opt_rcn.load_state_fields("opt_rcn", tensors)
    rng = np.random.default_rng(config.seed)
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(
        bundle=bundle, config=config,
        joint_set=joint_tri_set(bundle, radius=config.joint_radius),
        adjacency=build_adjacency(bundle.faces), model=model, opt=opt,
        rng=rng, iteration=int(meta["iteration"]), stage=int(meta["stage"]),
        rcn=rcn, opt_rcn=opt_rcn, stabilized=bool(meta["stabilized"]),
        count_history=[list(x) for x in meta["count_history"]])

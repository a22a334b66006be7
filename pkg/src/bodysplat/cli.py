"""Command-line pipeline: train, render, animate, eval, extract-mesh,
make-synthetic.

Exit codes: 0 success, 1 usage error (bad flags), 2 data error (missing
or malformed inputs, failed runs).  All commands write only below their
--out target and are deterministic for a given --seed.
"""

import argparse
import os
import sys

import numpy as np

from .body import Pose, lbs_pose, load_body, make_mini_body, save_body
from .data import (
    MANIFEST_NAME,
    load_frame,
    load_manifest,
    make_synthetic_dataset,
    write_png,
)
from .deform import deform_avatar
from .losses import psnr, ssim
from .meshing import extract_avatar_mesh, save_obj
from .raster import Camera, render
from .rcn import rcn_forward
from .serial import read_json, write_json
from .train import TrainConfig, load_checkpoint, run_training

REPORT_VERSION = 1

DATA_ERRORS = (OSError, ValueError, KeyError, RuntimeError,
               FloatingPointError, np.linalg.LinAlgError)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the pipeline reserves 2 for data
    errors, so usage problems are remapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _body_dir(path):
    """Accept either the body directory or the path to its body.json."""
    if path.endswith(".json"):
        return os.path.dirname(path) or "."
    return path


def _load_pose(record):
    theta = np.asarray(record["theta"], dtype=np.float64)
    return Pose(
        theta=theta.reshape(-1, 3),
        translation=np.asarray(record.get("translation", (0.0, 0.0, 0.0)),
                               dtype=np.float64),
        beta=np.asarray(record.get("beta", ()), dtype=np.float64))


def _pose_from_args(args, manifest=None):
    if getattr(args, "pose", None):
        return _load_pose(read_json(args.pose))
    frame_id = args.pose_frame
    if manifest is None:
        raise ValueError("--pose-frame needs --data pointing at the dataset")
    if frame_id not in manifest.records:
        raise KeyError(f"frame {frame_id} not in dataset")
    return _load_pose(manifest.records[frame_id])


def _render_pose(state, pose, camera):
    """Deform the checkpointed avatar into `pose` and render it."""
    posed = lbs_pose(state.bundle, pose)
    comp = None
    if state.rcn is not None:
        comp, _ = rcn_forward(
            state.rcn, state.model.face, state.model.bary,
            state.model.offset, state.model.rot, pose.theta.ravel())
    batch, _ = deform_avatar(state.model, posed, comp)
    return render(batch, camera)


def cmd_train(args):
    bundle = load_body(_body_dir(args.body))
    manifest = load_manifest(args.data)
    cfg = dict(read_json(args.config)) if args.config else {}
    for flag, key in (("seed", "seed"), ("splats", "n_splats"),
                      ("stage1_iters", "stage1_iters"),
                      ("stage2_iters", "stage2_iters")):
        value = getattr(args, flag)
        if value is not None:
            cfg[key] = value
    config = TrainConfig.from_dict({**TrainConfig().to_dict(), **cfg})
    state = run_training(bundle, manifest, config, args.out)
    print(f"trained {state.iteration} iterations "
          f"({state.model.count} splats, stage {state.stage}); "
          f"checkpoint in {os.path.join(args.out, 'checkpoint')}")
    return 0


def cmd_render(args):
    bundle = load_body(_body_dir(args.body))
    state = load_checkpoint(args.ckpt, bundle)
    camera = Camera.from_dict(read_json(args.camera))
    manifest = load_manifest(args.data) if args.data else None
    pose = _pose_from_args(args, manifest)
    out = _render_pose(state, pose, camera)
    write_png(args.out, np.clip(out.color, 0.0, 1.0))
    print(f"wrote {args.out}")
    return 0


def cmd_animate(args):
    bundle = load_body(_body_dir(args.body))
    state = load_checkpoint(args.ckpt, bundle)
    camera = Camera.from_dict(read_json(args.camera))
    records = read_json(args.poses)
    if not isinstance(records, list) or not records:
        raise ValueError("poses file must be a non-empty JSON array")
    os.makedirs(args.out, exist_ok=True)
    for i, rec in enumerate(records):
        out = _render_pose(state, _load_pose(rec), camera)
        write_png(os.path.join(args.out, "frame_%05d.png" % i),
                  np.clip(out.color, 0.0, 1.0))
    print(f"wrote {len(records)} frames to {args.out}")
    return 0


def cmd_eval(args):
    bundle = load_body(_body_dir(args.body))
    state = load_checkpoint(args.ckpt, bundle)
    manifest = load_manifest(args.data)
    ids = manifest.test_ids if args.split == "test" else manifest.train_ids
    if not ids:
        raise ValueError(f"dataset has no {args.split} frames")
    rows = []
    for fid in ids:
        frame = load_frame(manifest, fid)
        out = _render_pose(state, frame.pose, frame.camera)
        pred = np.clip(out.color, 0.0, 1.0)
        target = frame.image * frame.mask[..., None]
        rows.append({"id": fid, "psnr": psnr(pred, target),
                     "ssim": ssim(pred, target), "lpips": None})
    report = {
        "version": REPORT_VERSION,
        "split": args.split,
        "frames": rows,
        "mean": {
            "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows])),
            "lpips": None,
        },
    }
    write_json(args.report, report)
    print(f"{args.split}: mean PSNR {report['mean']['psnr']:.2f} dB, "
          f"mean SSIM {report['mean']['ssim']:.4f} "
          f"({len(rows)} frames) -> {args.report}")
    return 0


def cmd_extract_mesh(args):
    bundle = load_body(_body_dir(args.body))
    state = load_checkpoint(args.ckpt, bundle)
    pose = _load_pose(read_json(args.pose)) if args.pose else None
    mesh = extract_avatar_mesh(
        state.model, resolution=args.resolution, n_views=args.views,
        image_size=args.image_size, pose=pose)
    if mesh.empty:
        raise RuntimeError("extraction produced an empty mesh")
    save_obj(mesh, args.out)
    print(f"wrote {args.out} ({mesh.vertices.shape[0]} vertices, "
          f"{mesh.faces.shape[0]} triangles)")
    return 0


def cmd_make_synthetic(args):
    if args.mini_body:
        bundle = make_mini_body(seed=args.seed)
        os.makedirs(args.out, exist_ok=True)
        save_body(bundle, os.path.join(args.out, "body"))
    elif args.body:
        bundle = load_body(_body_dir(args.body))
    else:
        raise ValueError("pass --body DIR or --mini-body")
    manifest_path, _ = make_synthetic_dataset(
        bundle, args.out, n_frames=args.frames, seed=args.seed,
        width=args.size, height=args.size, n_splats=args.splats)
    print(f"wrote {manifest_path}")
    return 0


def _build_parser():
    top = _Parser(
        prog="bodysplat",
        description="Animatable-avatar pipeline on 2D surfels: train from "
                    "posed images, render novel views and poses, export "
                    "meshes, and build synthetic test datasets.")
    top.add_argument("--threads", type=int, default=None,
                     help="cap worker threads used by the accelerated "
                          "rasterizer backend (default: library default)")
    sub = top.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train", help="fit an avatar to a dataset",
                       description="Two-stage optimization; writes "
                                   "train_log.jsonl and checkpoint/ under "
                                   "--out.")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--body", required=True, help="body model directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (TrainConfig fields); "
                                    "flags below override it")
    p.add_argument("--seed", type=int, default=None, help="RNG seed")
    p.add_argument("--splats", type=int, default=None,
                   help="initial splat count (default: config value)")
    p.add_argument("--stage1-iters", type=int, default=None,
                   dest="stage1_iters", help="stage-1 iterations")
    p.add_argument("--stage2-iters", type=int, default=None,
                   dest="stage2_iters", help="stage-2 iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one novel view/pose",
                       description="Renders the checkpointed avatar from a "
                                   "camera JSON, posed by --pose or by a "
                                   "dataset frame via --pose-frame.")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--body", required=True, help="body model directory")
    p.add_argument("--camera", required=True, help="camera JSON file")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--pose-frame", dest="pose_frame", type=int,
                   help="take the pose of this dataset frame id "
                        "(needs --data)")
    g.add_argument("--pose", help="pose JSON file "
                                  "(theta, translation, beta)")
    p.add_argument("--data", help="dataset directory for --pose-frame")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("animate", help="render a pose sequence",
                       description="Renders every pose of a JSON array from "
                                   "one camera into --out/frame_%%05d.png.")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--body", required=True, help="body model directory")
    p.add_argument("--poses", required=True,
                   help="JSON array of pose records")
    p.add_argument("--camera", required=True, help="camera JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a dataset split",
                       description="Renders each frame of the split with its "
                                   "own camera and pose and writes a "
                                   "versioned JSON metric report (the LPIPS "
                                   "column is emitted as null).")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--body", required=True, help="body model directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "test"), default="test",
                   help="which split to score (default: test)")
    p.add_argument("--report", required=True, help="output JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-mesh", help="export the avatar as an OBJ",
                       description="Fuses rendered depth from an orbit of "
                                   "virtual cameras into a signed-distance "
                                   "volume and extracts the isosurface.")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--body", required=True, help="body model directory")
    p.add_argument("--out", required=True, help="output OBJ path")
    p.add_argument("--resolution", type=int, default=64,
                   help="voxels along the longest axis (default 64)")
    p.add_argument("--views", type=int, default=36,
                   help="orbit camera count (default 36)")
    p.add_argument("--image-size", dest="image_size", type=int, default=128,
                   help="depth render resolution (default 128)")
    p.add_argument("--pose", help="pose JSON file (default: rest pose)")
    p.set_defaults(func=cmd_extract_mesh)

    p = sub.add_parser("make-synthetic",
                       help="generate a synthetic turntable dataset",
                       description="Renders a procedurally colored avatar "
                                   "from a turntable of poses into a "
                                   "self-contained dataset directory "
                                   "(images, masks, %s)." % MANIFEST_NAME)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--body", help="body model directory")
    p.add_argument("--mini-body", dest="mini_body", action="store_true",
                   help="generate the procedural test body instead of "
                        "loading one (also saved under --out/body)")
    p.add_argument("--frames", type=int, default=8,
                   help="turntable frame count (default 8)")
    p.add_argument("--size", type=int, default=64,
                   help="image width and height (default 64)")
    p.add_argument("--splats", type=int, default=400,
                   help="ground-truth avatar splat count (default 400)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.set_defaults(func=cmd_make_synthetic)
    return top


def _cap_threads(n):
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be >= 1")
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _cap_threads(args.threads)
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"bodysplat {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

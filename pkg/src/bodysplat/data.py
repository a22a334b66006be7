"""Dataset loading and synthesis for monocular capture training.

On-disk layout: a `dataset.json` manifest next to `frames/%05d.png` and
`masks/%05d.png`.  The manifest carries one static pinhole camera,
per-frame pose records (axis-angle joints, shape coefficients, root
translation) and an explicit train/test split.  Images are stored as
8-bit sRGB PNG and converted to linear light on load; training happens
in linear light.

`make_synthetic_dataset` renders a known ground-truth avatar spinning on
a turntable in front of the static camera, producing a closed-loop
fixture: training on it should recover the ground-truth renders.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .body import Pose, bundle_hash, joint_tri_set, lbs_pose
from .deform import deform_avatar
from .embedding import init_splats, sample_triangles, save_avatar
from .quatgeom import SH_C0
from .raster import Camera, make_lookat_camera, render
from .serial import read_json, write_json

MANIFEST_VERSION = 1
MANIFEST_NAME = "dataset.json"


@dataclass(frozen=True)
class FrameSample:
    """One training observation: image, mask and the body pose."""

    frame_id: int
    image: np.ndarray    # (H, W, 3) linear RGB in [0, 1]
    mask: np.ndarray     # (H, W) bool
    pose: Pose
    camera: Camera


@dataclass(frozen=True)
class DatasetManifest:
    """Parsed dataset.json plus the directory it lives in."""

    root: str
    camera: Camera
    frame_ids: tuple          # ordered frame ids
    records: dict             # id -> raw frame record
    train_ids: tuple
    test_ids: tuple

    @property
    def n_frames(self):
        return len(self.frame_ids)


# ---------------------------------------------------------------------------
# sRGB transfer
# ---------------------------------------------------------------------------

def srgb_to_linear(c):
    """Decode sRGB values in [0, 1] to linear light."""
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92,
                    ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    """Encode linear-light values in [0, 1] to sRGB."""
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c,
                    1.055 * c ** (1.0 / 2.4) - 0.055)


def write_png(path, image, srgb=True):
    """Write a float image in [0, 1] as 8-bit PNG.

    Args:
        path: output file.
        image: (H, W) or (H, W, 3) float array.
        srgb: encode linear input to sRGB before quantization.
    """
    arr = np.asarray(image, dtype=np.float64)
    if srgb:
        arr = linear_to_srgb(arr)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path)


def read_png(path, srgb=True):
    """Read an 8-bit PNG as float in [0, 1] (linear light if srgb)."""
    with Image.open(path) as im:
        data = np.asarray(im, dtype=np.float64) / 255.0
    if srgb:
        data = srgb_to_linear(data)
    return data


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def _fail(path, field, msg):
    raise ValueError("%s: field %r: %s" % (path, field, msg))


def load_manifest(root):
    """Parse and validate `dataset.json` under `root`.

    Returns:
        DatasetManifest.

    Raises:
        ValueError: schema violations, with path and field diagnostics.
        FileNotFoundError: missing manifest or referenced files.
    """
    path = os.path.join(root, MANIFEST_NAME)
    raw = read_json(path)
    if raw.get("version") != MANIFEST_VERSION:
        _fail(path, "version", "expected %d, got %r"
              % (MANIFEST_VERSION, raw.get("version")))
    cam_raw = raw.get("camera")
    if not isinstance(cam_raw, dict):
        _fail(path, "camera", "missing or not an object")
    try:
        camera = Camera.from_dict(cam_raw)
    except (ValueError, KeyError, TypeError) as exc:
        _fail(path, "camera", str(exc))
    frames = raw.get("frames")
    if not isinstance(frames, list) or not frames:
        _fail(path, "frames", "missing or empty")
    records = {}
    ids = []
    for k, rec in enumerate(frames):
        fid = rec.get("id")
        if not isinstance(fid, int):
            _fail(path, "frames[%d].id" % k, "missing integer id")
        if fid in records:
            _fail(path, "frames[%d].id" % k, "duplicate id %d" % fid)
        for key in ("image", "mask"):
            rel = rec.get(key)
            if not isinstance(rel, str):
                _fail(path, "frames[%d].%s" % (k, key), "missing path")
            full = os.path.join(root, rel)
            if not os.path.isfile(full):
                raise FileNotFoundError(
                    "%s: frames[%d].%s: file %r does not exist"
                    % (path, k, key, full))
        theta = rec.get("theta")
        if not isinstance(theta, list) or len(theta) % 3 != 0 or not theta:
            _fail(path, "frames[%d].theta" % k,
                  "expected a flat list with length divisible by 3")
        if not isinstance(rec.get("beta"), list):
            _fail(path, "frames[%d].beta" % k, "expected a list")
        tr = rec.get("translation")
        if not isinstance(tr, list) or len(tr) != 3:
            _fail(path, "frames[%d].translation" % k, "expected 3 floats")
        records[fid] = rec
        ids.append(fid)
    split = raw.get("split")
    if not isinstance(split, dict):
        _fail(path, "split", "missing or not an object")
    train = split.get("train")
    test = split.get("test")
    if not isinstance(train, list) or not isinstance(test, list):
        _fail(path, "split", "train/test must be lists")
    known = set(ids)
    for name, part in (("train", train), ("test", test)):
        for fid in part:
            if fid not in known:
                _fail(path, "split.%s" % name, "unknown frame id %r" % fid)
    if set(train) & set(test):
        _fail(path, "split", "train and test overlap")
    if not train:
        _fail(path, "split.train", "empty training split")
    return DatasetManifest(
        root=root, camera=camera, frame_ids=tuple(ids), records=records,
        train_ids=tuple(train), test_ids=tuple(test))


def load_frame(manifest, frame_id):
    """Load one frame as a FrameSample (sRGB decoded, mask binarized).

    Raises:
        KeyError: unknown frame id.
        ValueError: empty mask or shape mismatch with the camera.
    """
    if frame_id not in manifest.records:
        raise KeyError("unknown frame id %r" % (frame_id,))
    rec = manifest.records[frame_id]
    image = read_png(os.path.join(manifest.root, rec["image"]), srgb=True)
    mask = read_png(os.path.join(manifest.root, rec["mask"]), srgb=False)
    if mask.ndim == 3:
        mask = mask[..., 0]
    mask = mask > 0.5
    cam = manifest.camera
    if image.shape != (cam.height, cam.width, 3):
        raise ValueError("frame %d image shape %s does not match camera %dx%d"
                         % (frame_id, image.shape, cam.width, cam.height))
    if mask.shape != (cam.height, cam.width):
        raise ValueError("frame %d mask shape mismatch" % frame_id)
    if not mask.any():
        raise ValueError("frame %d has an empty mask" % frame_id)
    theta = np.asarray(rec["theta"], dtype=np.float64).reshape(-1, 3)
    pose = Pose(theta=theta,
                translation=np.asarray(rec["translation"], dtype=np.float64),
                beta=np.asarray(rec["beta"], dtype=np.float64))
    return FrameSample(frame_id=frame_id, image=image, mask=mask,
                       pose=pose, camera=cam)


# ---------------------------------------------------------------------------
# Synthetic closed-loop fixture
# ---------------------------------------------------------------------------

def make_ground_truth_avatar(bundle, n_splats=400, seed=0,
                             joint_radius=0.05):
    """A deterministic, opaque, colorful avatar used as synthesis target."""
    joint_set = joint_tri_set(bundle, radius=joint_radius)
    faces = sample_triangles(bundle, n_splats, joint_set, seed=seed)
    model = init_splats(bundle, faces, joint_set, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    model.opacity[:] = 0.95
    # Vivid per-splat base colors plus mild view-dependent variation.
    base = rng.uniform(0.1, 0.9, size=(model.count, 3))
    model.sh[:, 0, :] = (base - 0.5) / SH_C0
    model.sh[:, 1:, :] = rng.normal(0.0, 0.02, size=(model.count, 8, 3))
    model.scale[:] = np.maximum(model.scale * 1.6, 1e-4)
    return model


def turntable_pose(bundle, angle, beta=None):
    """Rest pose spun by `angle` radians around the vertical root axis."""
    pose = Pose.rest(bundle)
    theta = pose.theta.copy()
    theta[0] = np.array([0.0, angle, 0.0])
    return Pose(theta=theta, translation=pose.translation,
                beta=pose.beta if beta is None else beta)


def make_synthetic_dataset(bundle, out_dir, n_frames=8, seed=0,
                           width=64, height=64, n_splats=400,
                           test_every=4):
    """Render a ground-truth avatar turntable into the neutral layout.

    The avatar stays in the rest pose while the root joint spins one full
    turn in front of a static camera — one frame per angle.  Every
    `test_every`-th frame goes to the test split.  Regeneration with the
    same arguments is byte-identical.

    Returns:
        (manifest_path, gt_model): path to dataset.json and the
        ground-truth AvatarModel (also saved under `gt_avatar/`).
    """
    os.makedirs(out_dir, exist_ok=True)
    frames_dir = os.path.join(out_dir, "frames")
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)

    model = make_ground_truth_avatar(bundle, n_splats=n_splats, seed=seed)
    verts = bundle.rest_vertices
    center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    extent = float(np.max(verts.max(axis=0) - verts.min(axis=0)))
    f = 1.2 * max(width, height)
    dist = 1.4 * f * extent / max(width, height)
    camera = make_lookat_camera(
        eye=center + np.array([0.0, 0.0, dist]), target=center,
        fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height)

    frame_recs = []
    for k in range(n_frames):
        angle = 2.0 * np.pi * k / n_frames
        pose = turntable_pose(bundle, angle)
        posed = lbs_pose(bundle, pose)
        batch, _ = deform_avatar(model, posed)
        out = render(batch, camera)
        img_rel = "frames/%05d.png" % k
        mask_rel = "masks/%05d.png" % k
        write_png(os.path.join(out_dir, img_rel),
                  np.clip(out.color, 0.0, 1.0), srgb=True)
        write_png(os.path.join(out_dir, mask_rel),
                  (out.alpha > 0.5).astype(np.float64), srgb=False)
        frame_recs.append({
            "id": k,
            "image": img_rel,
            "mask": mask_rel,
            "theta": [float(v) for v in pose.theta.ravel()],
            "beta": [float(v) for v in pose.beta.ravel()],
            "translation": [float(v) for v in pose.translation],
        })
    test_ids = [k for k in range(n_frames)
                if test_every and k % test_every == test_every - 1]
    train_ids = [k for k in range(n_frames) if k not in set(test_ids)]
    manifest = {
        "version": MANIFEST_VERSION,
        "camera": camera.to_dict(),
        "frames": frame_recs,
        "split": {"train": train_ids, "test": test_ids},
    }
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    write_json(manifest_path, manifest)
    save_avatar(model, os.path.join(out_dir, "gt_avatar"),
                bundle_hash(bundle))
    return manifest_path, model

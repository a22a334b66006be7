"""PeopleSnapshot-style capture folder -> neutral dataset layout.

Expected input directory:

    images/*.png           one frame per file, sorted by name
    masks/*.png            matching binary masks, sorted by name
    poses.npz              betas (S,), thetas (N, 72), transl (N, 3)
    cameras.npz            intrinsic (3, 3), extrinsic (4, 4),
                           optional height/width scalars
    split.json             optional {"train": [...], "test": [...]}

Output: ``dataset.json`` plus bytewise copies of the frames under
``frames/%05d.png`` and ``masks/%05d.png``.  Pose and camera numbers are
copied verbatim (dtype widening only); without a split file every frame
goes to the training split.
"""

from __future__ import annotations

import json
import os
import shutil

import numpy as np
from PIL import Image

from . import layout

THETA_LEN = 72


def _sorted_files(root: str, sub: str) -> list[str]:
    full = os.path.join(root, sub)
    if not os.path.isdir(full):
        raise ValueError(f"{root}: capture has no {sub}/ directory")
    names = sorted(n for n in os.listdir(full)
                   if os.path.isfile(os.path.join(full, n)))
    if not names:
        raise ValueError(f"{root}: {sub}/ is empty")
    return [os.path.join(full, n) for n in names]


def _npz(root: str, name: str) -> dict:
    path = os.path.join(root, name)
    if not os.path.isfile(path):
        raise ValueError(f"{root}: capture has no {name}")
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ValueError(f"{where} is missing field {key!r}")
    return d[key]


def convert_capture(input_dir: str, out_dir: str) -> dict:
    """Convert one capture directory into a neutral dataset directory.

    Args:
        input_dir: capture folder (layout in the module docstring).
        out_dir: directory to create/overwrite with the dataset.

    Returns:
        the manifest dict that was written as dataset.json.

    Raises:
        ValueError: missing inputs, malformed pose/camera arrays, or a
            frame/pose count mismatch.
    """
    images = _sorted_files(input_dir, "images")
    masks = _sorted_files(input_dir, "masks")
    poses = _npz(input_dir, "poses.npz")
    cams = _npz(input_dir, "cameras.npz")

    thetas = np.asarray(_require(poses, "thetas", "poses.npz"), dtype=np.float64)
    transl = np.asarray(_require(poses, "transl", "poses.npz"), dtype=np.float64)
    betas = np.asarray(_require(poses, "betas", "poses.npz"), dtype=np.float64).ravel()
    if thetas.ndim != 2 or thetas.shape[1] != THETA_LEN:
        raise ValueError(f"poses.npz: thetas has shape {thetas.shape}, "
                         f"expected (N, {THETA_LEN})")
    n = thetas.shape[0]
    if transl.shape != (n, 3):
        raise ValueError(f"poses.npz: transl has shape {transl.shape}, "
                         f"expected ({n}, 3)")
    if len(images) != n or len(masks) != n:
        raise ValueError(f"{input_dir}: frame/pose count mismatch: "
                         f"{len(images)} images, {len(masks)} masks, "
                         f"{n} poses")

    intrinsic = np.asarray(_require(cams, "intrinsic", "cameras.npz"), dtype=np.float64)
    extrinsic = np.asarray(_require(cams, "extrinsic", "cameras.npz"), dtype=np.float64)
    if intrinsic.shape != (3, 3):
        raise ValueError(f"cameras.npz: intrinsic has shape {intrinsic.shape}, "
                         f"expected (3, 3)")
    if extrinsic.shape != (4, 4):
        raise ValueError(f"cameras.npz: extrinsic has shape {extrinsic.shape}, "
                         f"expected (4, 4)")
    with Image.open(images[0]) as im:
        width, height = im.size
    width = int(cams.get("width", width))
    height = int(cams.get("height", height))
    for path in images + masks:
        with Image.open(path) as im:
            if im.size != (width, height):
                raise ValueError(f"{path}: size {im.size} does not match "
                                 f"camera {width}x{height}")

    split_path = os.path.join(input_dir, "split.json")
    if os.path.isfile(split_path):
        with open(split_path, "r", encoding="utf-8") as fh:
            split = json.load(fh)
        train = [int(i) for i in split.get("train", [])]
        test = [int(i) for i in split.get("test", [])]
        bad = (set(train) | set(test)) - set(range(n))
        if bad:
            raise ValueError(f"{split_path}: split references unknown "
                             f"frame ids {sorted(bad)}")
        if not train:
            raise ValueError(f"{split_path}: empty training split")
    else:
        train, test = list(range(n)), []

    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    frames = []
    for i in range(n):
        image_rel = f"frames/{i:05d}.png"
        mask_rel = f"masks/{i:05d}.png"
        shutil.copyfile(images[i], os.path.join(out_dir, image_rel))
        shutil.copyfile(masks[i], os.path.join(out_dir, mask_rel))
        frames.append({
            "id": i,
            "image": image_rel,
            "mask": mask_rel,
            "theta": [float(v) for v in thetas[i]],
            "translation": [float(v) for v in transl[i]],
            "beta": [float(v) for v in betas],
        })

    manifest = {
        "version": 1,
        "camera": {
            "fx": float(intrinsic[0, 0]),
            "fy": float(intrinsic[1, 1]),
            "cx": float(intrinsic[0, 2]),
            "cy": float(intrinsic[1, 2]),
            "width": width,
            "height": height,
            "world_to_camera": [[float(v) for v in row] for row in extrinsic],
        },
        "frames": frames,
        "split": {"train": train, "test": test},
    }
    layout.write_json(os.path.join(out_dir, "dataset.json"), manifest)
    return manifest

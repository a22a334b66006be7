"""SMPL model pickle -> body.json/body.bin bundle.

The bundle layout is the one the avatar pipeline loads: a JSON manifest
{version, V, F, J, S, fields} next to a binary blob of little-endian
f4/i4 arrays in manifest order.  The only numeric change applied to the
source data is a renormalization of the skinning-weight rows so each sums
to 1; everything else is a dtype cast.
"""

from __future__ import annotations

import os

import numpy as np

from . import layout
from .smplpkl import as_array, load_smpl_pickle, require

EXPECTED_VERTICES = 6890
EXPECTED_FACES = 13776
EXPECTED_JOINTS = 24


def convert_body(model_path: str, out_dir: str) -> dict:
    """Convert one SMPL pickle into a body bundle directory.

    Args:
        model_path: SMPL model pickle (any gender variant).
        out_dir: directory to create/overwrite with body.json + body.bin.

    Returns:
        dict with the written counts {"V", "F", "J", "S"}.

    Raises:
        ValueError: missing fields (named), wrong array shapes, or counts
            other than 6890 vertices / 13776 faces / 24 joints.
    """
    data = load_smpl_pickle(model_path)

    vertices = as_array(require(data, "v_template", model_path)).astype(np.float64)
    faces = as_array(require(data, "f", model_path)).astype(np.int64)
    weights = as_array(require(data, "weights", model_path)).astype(np.float64)
    kintree = as_array(require(data, "kintree_table", model_path)).astype(np.int64)

    v, j = weights.shape if weights.ndim == 2 else (0, 0)
    f = faces.shape[0] if faces.ndim == 2 else 0
    if vertices.shape != (EXPECTED_VERTICES, 3):
        raise ValueError(f"{model_path}: v_template has shape {vertices.shape}, "
                         f"expected ({EXPECTED_VERTICES}, 3)")
    if faces.shape != (EXPECTED_FACES, 3):
        raise ValueError(f"{model_path}: f has shape {faces.shape}, "
                         f"expected ({EXPECTED_FACES}, 3)")
    if (v, j) != (EXPECTED_VERTICES, EXPECTED_JOINTS):
        raise ValueError(f"{model_path}: weights has shape {weights.shape}, "
                         f"expected ({EXPECTED_VERTICES}, {EXPECTED_JOINTS})")
    if faces.min() < 0 or faces.max() >= v:
        raise ValueError(f"{model_path}: faces index out-of-range vertices")
    if weights.min() < 0:
        raise ValueError(f"{model_path}: negative skinning weight")
    row_sums = weights.sum(axis=1)
    if row_sums.min() <= 0:
        raise ValueError(f"{model_path}: skinning-weight row sums to zero")
    weights = weights / row_sums[:, None]

    # kinematic tree: row 0 holds parent ids, with the root stored as the
    # unsigned wrap of -1; anything outside [0, J) is the root sentinel
    if kintree.ndim != 2 or kintree.shape[0] < 1 or kintree.shape[1] != EXPECTED_JOINTS:
        raise ValueError(f"{model_path}: kintree_table has shape {kintree.shape}, "
                         f"expected (2, {EXPECTED_JOINTS})")
    parents = kintree[0].copy()
    parents[(parents < 0) | (parents >= EXPECTED_JOINTS)] = -1
    if parents[0] != -1:
        raise ValueError(f"{model_path}: kintree_table joint 0 is not the root")

    regressor = None
    if "J_regressor" in data:
        regressor = as_array(data["J_regressor"]).astype(np.float64)
        if regressor.shape != (EXPECTED_JOINTS, EXPECTED_VERTICES):
            raise ValueError(f"{model_path}: J_regressor has shape "
                             f"{regressor.shape}, expected "
                             f"({EXPECTED_JOINTS}, {EXPECTED_VERTICES})")
    if "J" in data:
        joints = as_array(data["J"]).astype(np.float64)
        if joints.shape != (EXPECTED_JOINTS, 3):
            raise ValueError(f"{model_path}: J has shape {joints.shape}, "
                             f"expected ({EXPECTED_JOINTS}, 3)")
    elif regressor is not None:
        joints = regressor @ vertices
    else:
        raise ValueError(f"{model_path}: SMPL asset is missing field 'J' "
                         f"(and has no 'J_regressor' to derive it)")

    shape_basis = None
    if "shapedirs" in data:
        shape_basis = as_array(data["shapedirs"]).astype(np.float64)
        if shape_basis.ndim != 3 or shape_basis.shape[:2] != (EXPECTED_VERTICES, 3):
            raise ValueError(f"{model_path}: shapedirs has shape "
                             f"{shape_basis.shape}, expected "
                             f"({EXPECTED_VERTICES}, 3, S)")

    fields = [
        ("rest_vertices", vertices, "f4"),
        ("faces", faces, "i4"),
        ("joint_rest_positions", joints, "f4"),
        ("kinematic_parents", parents, "i4"),
        ("skin_weights", weights, "f4"),
    ]
    if shape_basis is not None:
        fields.append(("shape_basis", shape_basis, "f4"))
    if regressor is not None:
        fields.append(("joint_regressor", regressor, "f4"))

    blob, entries = layout.pack_fields(fields)
    counts = {
        "V": EXPECTED_VERTICES,
        "F": EXPECTED_FACES,
        "J": EXPECTED_JOINTS,
        "S": 0 if shape_basis is None else int(shape_basis.shape[2]),
    }
    os.makedirs(out_dir, exist_ok=True)
    layout.write_blob(os.path.join(out_dir, "body.bin"), blob)
    layout.write_json(os.path.join(out_dir, "body.json"),
                      {"version": 1, "fields": entries, **counts})
    return counts

"""Shared fixtures: a fake full-size SMPL pickle and a tiny capture folder.

The SMPL fixture reproduces the real asset's structure — a Python 2 era
pickle whose arrays are wrapped in chumpy objects and whose joint
regressor is a scipy sparse matrix — at the genuine 6890/13776/24 sizes,
so the converter's stub unpickler and count asserts are exercised for
real.  The capture fixture is a 3-frame, 8x8 PeopleSnapshot-style folder.
"""

import json
import os
import pickle
import sys
import types

import numpy as np
import pytest
import scipy.sparse
from PIL import Image

V, F, J, S = 6890, 13776, 24, 10

SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17,
     18, 19, 20, 21], dtype=np.int64)


class _FakeCh:
    """Pickles under the chumpy module path, like real SMPL assets."""


_FakeCh.__module__ = "chumpy.ch"
_FakeCh.__qualname__ = "Ch"
_FakeCh.__name__ = "Ch"


def _ch(arr):
    obj = _FakeCh()
    obj.x = arr
    return obj


def raw(value):
    """Unwrap a fixture dict entry to a plain dense ndarray."""
    if isinstance(value, _FakeCh):
        return np.asarray(value.x)
    if hasattr(value, "toarray"):
        return np.asarray(value.toarray())
    return np.asarray(value)


def make_smpl_dict(rng):
    """Full-size SMPL-shaped dict with chumpy wrappers and sparse parts."""
    vertices = rng.uniform(-0.9, 0.9, (V, 3))
    faces = rng.integers(0, V, (F, 3)).astype(np.uint32)
    # a few dominant joints per vertex; deliberately NOT normalized so the
    # converter's renormalization contract is actually exercised
    weights = rng.uniform(0.0, 1.0, (V, J)) ** 6
    weights *= 1.7
    regressor = scipy.sparse.csc_matrix(
        np.where(rng.uniform(size=(J, V)) < 0.002,
                 rng.uniform(0.1, 1.0, (J, V)), 0.0))
    kintree = np.stack([
        np.where(SMPL_PARENTS < 0, np.uint32(2**32 - 1),
                 SMPL_PARENTS.astype(np.uint32)),
        np.arange(J, dtype=np.uint32),
    ])
    return {
        "v_template": _ch(vertices),
        "f": faces,
        "weights": _ch(weights),
        "J": _ch(rng.uniform(-0.9, 0.9, (J, 3))),
        "J_regressor": regressor,
        "kintree_table": kintree,
        "shapedirs": _ch(rng.uniform(-0.1, 0.1, (V, 3, S))),
        "bs_style": "lbs",
    }


def write_smpl_pickle(path, data):
    """Pickle `data` with chumpy-path classes resolvable, then clean up."""
    ch_pkg = types.ModuleType("chumpy")
    ch_mod = types.ModuleType("chumpy.ch")
    ch_mod.Ch = _FakeCh
    ch_pkg.ch = ch_mod
    sys.modules["chumpy"] = ch_pkg
    sys.modules["chumpy.ch"] = ch_mod
    try:
        with open(path, "wb") as fh:
            pickle.dump(data, fh, protocol=2)
    finally:
        del sys.modules["chumpy"], sys.modules["chumpy.ch"]


@pytest.fixture(scope="session")
def smpl_dict():
    return make_smpl_dict(np.random.default_rng(0))


@pytest.fixture(scope="session")
def smpl_path(smpl_dict, tmp_path_factory):
    path = str(tmp_path_factory.mktemp("smpl") / "model.pkl")
    write_smpl_pickle(path, smpl_dict)
    return path


def make_capture(root, n_frames=3, size=8, seed=0, split=True):
    """Write a PeopleSnapshot-style capture folder; returns its path."""
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(root, "images"))
    os.makedirs(os.path.join(root, "masks"))
    for i in range(n_frames):
        pixels = rng.integers(0, 256, (size, size, 3)).astype(np.uint8)
        Image.fromarray(pixels, "RGB").save(
            os.path.join(root, "images", f"image_{i:04d}.png"))
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[2:size - 2, 2:size - 2] = 255
        Image.fromarray(mask, "L").save(
            os.path.join(root, "masks", f"mask_{i:04d}.png"))
    np.savez(os.path.join(root, "poses.npz"),
             betas=rng.normal(0.0, 0.1, S).astype(np.float32),
             thetas=rng.normal(0.0, 0.2, (n_frames, 72)).astype(np.float32),
             transl=rng.normal(0.0, 0.1, (n_frames, 3)).astype(np.float32))
    extrinsic = np.eye(4, dtype=np.float32)
    extrinsic[2, 3] = 2.5
    np.savez(os.path.join(root, "cameras.npz"),
             intrinsic=np.array([[443.7, 0.0, (size - 1) / 2],
                                 [0.0, 443.7, (size - 1) / 2],
                                 [0.0, 0.0, 1.0]], dtype=np.float32),
             extrinsic=extrinsic,
             height=np.int64(size), width=np.int64(size))
    if split:
        with open(os.path.join(root, "split.json"), "w",
                  encoding="utf-8") as fh:
            json.dump({"train": list(range(n_frames - 1)),
                       "test": [n_frames - 1]}, fh)
    return root


@pytest.fixture()
def capture_dir(tmp_path):
    return make_capture(str(tmp_path / "capture"))

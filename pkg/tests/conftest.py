"""Shared fixtures: procedural mini body, small splat models, synthetic data."""

import numpy as np
import pytest

from bodysplat.body import Pose, joint_tri_set, lbs_pose, make_mini_body
from bodysplat.data import load_manifest, make_synthetic_dataset
from bodysplat.embedding import init_splats, sample_triangles


@pytest.fixture(scope="session")
def bundle():
    """The default 3-joint procedural mini body."""
    return make_mini_body(seed=0)


@pytest.fixture(scope="session")
def joint_set(bundle):
    """Joint-region triangle set sized for the mini body (12 faces)."""
    return joint_tri_set(bundle, radius=0.05)


@pytest.fixture(scope="session")
def rest_mesh(bundle):
    """The mini body posed at rest parameters."""
    return lbs_pose(bundle, Pose.rest(bundle))


@pytest.fixture(scope="session")
def small_model(bundle, joint_set):
    """A 40-splat avatar over the mini body (treat as read-only)."""
    faces = sample_triangles(bundle, 40, joint_set, seed=0)
    return init_splats(bundle, faces, joint_set, seed=0)


class SyntheticDataset:
    """Handle to an on-disk synthetic dataset plus its generator avatar."""

    def __init__(self, root, manifest, gt_model):
        self.root = root
        self.manifest = manifest
        self.gt_model = gt_model


@pytest.fixture(scope="session")
def dataset(tmp_path_factory, bundle):
    """Small 4-frame 32x32 synthetic dataset shared by loader/CLI tests."""
    root = tmp_path_factory.mktemp("synthetic")
    _, gt_model = make_synthetic_dataset(bundle, str(root), n_frames=4, seed=0,
                                         width=32, height=32, n_splats=120,
                                         test_every=4)
    return SyntheticDataset(str(root), load_manifest(str(root)), gt_model)


@pytest.fixture()
def rng():
    """Fresh deterministic generator per test."""
    return np.random.default_rng(12345)

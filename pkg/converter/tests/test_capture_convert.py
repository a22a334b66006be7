"""Tests for the capture-folder -> neutral-dataset converter."""

import json
import os

import numpy as np
import pytest

from smpl_convert.capture import convert_capture

from conftest import make_capture


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestConvertCapture:
    """PeopleSnapshot-style folder to dataset.json layout."""

    def test_manifest_structure(self, capture_dir, tmp_path):
        """version, per-frame records, and the copied split."""
        out = str(tmp_path / "data")
        manifest = convert_capture(capture_dir, out)
        assert manifest["version"] == 1
        assert [f["id"] for f in manifest["frames"]] == [0, 1, 2]
        for rec in manifest["frames"]:
            assert len(rec["theta"]) == 72
            assert len(rec["translation"]) == 3
            assert len(rec["beta"]) == 10
        assert manifest["split"] == {"train": [0, 1], "test": [2]}
        with open(os.path.join(out, "dataset.json"), "r",
                  encoding="utf-8") as fh:
            assert json.load(fh) == manifest

    def test_frames_copied_bytewise(self, capture_dir, tmp_path):
        """Image and mask files are bit-exact copies of the capture."""
        out = str(tmp_path / "data")
        convert_capture(capture_dir, out)
        for i in range(3):
            assert _read(os.path.join(out, "frames", f"{i:05d}.png")) == \
                _read(os.path.join(capture_dir, "images",
                                   f"image_{i:04d}.png"))
            assert _read(os.path.join(out, "masks", f"{i:05d}.png")) == \
                _read(os.path.join(capture_dir, "masks",
                                   f"mask_{i:04d}.png"))

    def test_pose_and_camera_values_survive_exactly(self, capture_dir,
                                                    tmp_path):
        """Numbers in the manifest equal the widened float32 inputs."""
        out = str(tmp_path / "data")
        manifest = convert_capture(capture_dir, out)
        with np.load(os.path.join(capture_dir, "poses.npz")) as poses:
            thetas = poses["thetas"].astype(np.float64)
            betas = poses["betas"].astype(np.float64)
        with np.load(os.path.join(capture_dir, "cameras.npz")) as cams:
            intrinsic = cams["intrinsic"].astype(np.float64)
        assert manifest["camera"]["fx"] == intrinsic[0, 0]
        assert manifest["camera"]["cy"] == intrinsic[1, 2]
        np.testing.assert_array_equal(manifest["frames"][1]["theta"],
                                      thetas[1])
        np.testing.assert_array_equal(manifest["frames"][0]["beta"], betas)

    def test_loads_in_the_avatar_pipeline(self, capture_dir, tmp_path):
        """The written dataset passes the consumer's loader end to end."""
        bodysplat_data = pytest.importorskip("bodysplat.data")
        out = str(tmp_path / "data")
        convert_capture(capture_dir, out)
        manifest = bodysplat_data.load_manifest(out)
        assert manifest.frame_ids == (0, 1, 2)
        assert manifest.train_ids == (0, 1)
        sample = bodysplat_data.load_frame(manifest, 2)
        assert sample.image.shape == (8, 8, 3)
        assert sample.mask.sum() == 16
        assert sample.pose.theta.shape == (24, 3)

    def test_missing_split_defaults_to_all_train(self, tmp_path):
        """Without split.json every frame becomes a training frame."""
        cap = make_capture(str(tmp_path / "cap"), split=False)
        manifest = convert_capture(cap, str(tmp_path / "data"))
        assert manifest["split"] == {"train": [0, 1, 2], "test": []}

    def test_frame_pose_count_mismatch_rejected(self, capture_dir,
                                                tmp_path):
        """Removing one image makes counts disagree -> error."""
        os.remove(os.path.join(capture_dir, "images", "image_0002.png"))
        with pytest.raises(ValueError, match="count mismatch"):
            convert_capture(capture_dir, str(tmp_path / "data"))

    def test_wrong_theta_length_rejected(self, tmp_path):
        """Pose vectors must be 72 numbers per frame."""
        cap = make_capture(str(tmp_path / "cap"))
        path = os.path.join(cap, "poses.npz")
        with np.load(path) as poses:
            arrays = {k: poses[k] for k in poses.files}
        arrays["thetas"] = arrays["thetas"][:, :69]
        np.savez(path, **arrays)
        with pytest.raises(ValueError, match="72"):
            convert_capture(cap, str(tmp_path / "data"))

    def test_missing_poses_file_rejected(self, capture_dir, tmp_path):
        """A capture without poses.npz is refused by name."""
        os.remove(os.path.join(capture_dir, "poses.npz"))
        with pytest.raises(ValueError, match="poses.npz"):
            convert_capture(capture_dir, str(tmp_path / "data"))

    def test_size_mismatch_rejected(self, capture_dir, tmp_path):
        """A frame whose pixel size disagrees with the camera is refused."""
        from PIL import Image
        bad = np.zeros((4, 4, 3), dtype=np.uint8)
        Image.fromarray(bad, "RGB").save(
            os.path.join(capture_dir, "images", "image_0001.png"))
        with pytest.raises(ValueError, match="size"):
            convert_capture(capture_dir, str(tmp_path / "data"))

    def test_split_with_unknown_ids_rejected(self, capture_dir, tmp_path):
        """Split entries must reference existing frames."""
        with open(os.path.join(capture_dir, "split.json"), "w",
                  encoding="utf-8") as fh:
            json.dump({"train": [0, 9], "test": []}, fh)
        with pytest.raises(ValueError, match="unknown"):
            convert_capture(capture_dir, str(tmp_path / "data"))

    def test_output_byte_deterministic(self, capture_dir, tmp_path):
        """Two conversions of one capture are byte-identical trees."""
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        convert_capture(capture_dir, a)
        convert_capture(capture_dir, b)
        rels = []
        for base, _, names in os.walk(a):
            for name in names:
                rels.append(os.path.relpath(os.path.join(base, name), a))
        assert len(rels) == 7
        for rel in sorted(rels):
            assert _read(os.path.join(a, rel)) == \
                _read(os.path.join(b, rel)), rel

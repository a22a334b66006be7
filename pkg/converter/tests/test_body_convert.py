"""Tests for the SMPL pickle loader and the body-bundle converter."""

import json
import os

import numpy as np
import pytest

from smpl_convert.body import convert_body
from smpl_convert.smplpkl import ChumpyStub, as_array, load_smpl_pickle

from conftest import SMPL_PARENTS, V, F, J, S, make_smpl_dict, \
    write_smpl_pickle


class TestSmplPickleLoading:
    """Unpickling without chumpy installed."""

    def test_loads_dict_with_stubbed_wrappers(self, smpl_path):
        """chumpy-wrapped entries come back as stubs holding the array."""
        data = load_smpl_pickle(smpl_path)
        assert isinstance(data, dict)
        assert isinstance(data["v_template"], ChumpyStub)
        assert as_array(data["v_template"]).shape == (V, 3)

    def test_sparse_regressor_densifies(self, smpl_path):
        """The scipy sparse joint regressor converts to a dense array."""
        data = load_smpl_pickle(smpl_path)
        reg = as_array(data["J_regressor"])
        assert reg.shape == (J, V)
        assert np.count_nonzero(reg) > 0

    def test_plain_arrays_pass_through(self, smpl_dict):
        """as_array leaves ordinary ndarrays untouched in value."""
        np.testing.assert_array_equal(as_array(smpl_dict["f"]),
                                      smpl_dict["f"])

    def test_non_dict_pickle_rejected(self, tmp_path):
        """A pickle that is not a dict raises ValueError."""
        path = str(tmp_path / "bad.pkl")
        import pickle
        with open(path, "wb") as fh:
            pickle.dump([1, 2, 3], fh)
        with pytest.raises(ValueError, match="dict"):
            load_smpl_pickle(path)


class TestConvertBody:
    """SMPL pickle -> body.json/body.bin."""

    def test_writes_manifest_with_standard_counts(self, smpl_path, tmp_path):
        """body.json records version 1 and the 6890/13776/24 sizes."""
        out = str(tmp_path / "body")
        counts = convert_body(smpl_path, out)
        assert counts == {"V": V, "F": F, "J": J, "S": S}
        with open(os.path.join(out, "body.json"), "r",
                  encoding="utf-8") as fh:
            manifest = json.load(fh)
        assert manifest["version"] == 1
        assert (manifest["V"], manifest["F"], manifest["J"],
                manifest["S"]) == (V, F, J, S)
        names = [e["name"] for e in manifest["fields"]]
        assert names == ["rest_vertices", "faces", "joint_rest_positions",
                         "kinematic_parents", "skin_weights", "shape_basis",
                         "joint_regressor"]
        assert os.path.getsize(os.path.join(out, "body.bin")) == \
            sum(e["nbytes"] for e in manifest["fields"])

    def test_weight_rows_renormalized_after_cast(self, smpl_path, tmp_path):
        """The written float32 weight rows sum to 1 within 1e-7."""
        out = str(tmp_path / "body")
        convert_body(smpl_path, out)
        with open(os.path.join(out, "body.json"), "r",
                  encoding="utf-8") as fh:
            manifest = json.load(fh)
        entry = next(e for e in manifest["fields"]
                     if e["name"] == "skin_weights")
        with open(os.path.join(out, "body.bin"), "rb") as fh:
            blob = fh.read()
        weights = np.frombuffer(
            blob, dtype="<f4", count=V * J,
            offset=entry["offset"]).reshape(V, J).astype(np.float64)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0,
                                   rtol=0.0, atol=1e-7)

    def test_root_sentinel_mapped_to_minus_one(self, smpl_path, tmp_path):
        """The unsigned-wrapped root parent becomes -1 in the bundle."""
        out = str(tmp_path / "body")
        convert_body(smpl_path, out)
        with open(os.path.join(out, "body.json"), "r",
                  encoding="utf-8") as fh:
            manifest = json.load(fh)
        entry = next(e for e in manifest["fields"]
                     if e["name"] == "kinematic_parents")
        with open(os.path.join(out, "body.bin"), "rb") as fh:
            blob = fh.read()
        parents = np.frombuffer(blob, dtype="<i4", count=J,
                                offset=entry["offset"])
        np.testing.assert_array_equal(parents, SMPL_PARENTS)

    def test_output_byte_deterministic(self, smpl_path, tmp_path):
        """Converting the same pickle twice is byte-identical."""
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        convert_body(smpl_path, a)
        convert_body(smpl_path, b)
        for name in ("body.json", "body.bin"):
            with open(os.path.join(a, name), "rb") as fh:
                a_bytes = fh.read()
            with open(os.path.join(b, name), "rb") as fh:
                b_bytes = fh.read()
            assert a_bytes == b_bytes, name

    def test_optional_fields_omitted_when_absent(self, smpl_dict, tmp_path):
        """No shapedirs -> S=0 and no shape_basis entry; J derives from
        the regressor when absent."""
        data = dict(smpl_dict)
        del data["shapedirs"]
        del data["J"]
        path = str(tmp_path / "model.pkl")
        write_smpl_pickle(path, data)
        out = str(tmp_path / "body")
        counts = convert_body(path, out)
        assert counts["S"] == 0
        with open(os.path.join(out, "body.json"), "r",
                  encoding="utf-8") as fh:
            names = [e["name"] for e in json.load(fh)["fields"]]
        assert "shape_basis" not in names
        assert "joint_regressor" in names

    @pytest.mark.parametrize("missing", ["v_template", "f", "weights",
                                         "kintree_table"])
    def test_missing_field_named_in_error(self, smpl_dict, tmp_path,
                                          missing):
        """Each absent required key is reported by name."""
        data = {k: v for k, v in smpl_dict.items() if k != missing}
        path = str(tmp_path / "model.pkl")
        write_smpl_pickle(path, data)
        with pytest.raises(ValueError, match=missing):
            convert_body(path, str(tmp_path / "body"))

    def test_missing_joints_and_regressor_rejected(self, smpl_dict,
                                                   tmp_path):
        """With neither J nor J_regressor the error names 'J'."""
        data = {k: v for k, v in smpl_dict.items()
                if k not in ("J", "J_regressor")}
        path = str(tmp_path / "model.pkl")
        write_smpl_pickle(path, data)
        with pytest.raises(ValueError, match="'J'"):
            convert_body(path, str(tmp_path / "body"))

    def test_wrong_vertex_count_rejected(self, smpl_dict, tmp_path):
        """A non-standard template size fails the count assert."""
        data = dict(smpl_dict)
        data["v_template"] = np.zeros((100, 3))
        path = str(tmp_path / "model.pkl")
        write_smpl_pickle(path, data)
        with pytest.raises(ValueError, match="6890"):
            convert_body(path, str(tmp_path / "body"))

    def test_negative_weight_rejected(self, smpl_dict, tmp_path):
        """Negative skinning weights are refused, not clipped."""
        data = dict(smpl_dict)
        weights = np.asarray(data["weights"].x).copy()
        weights[0, 0] = -0.1
        data["weights"] = weights
        path = str(tmp_path / "model.pkl")
        write_smpl_pickle(path, data)
        with pytest.raises(ValueError, match="negative"):
            convert_body(path, str(tmp_path / "body"))

"""Tests for the smpl-convert command-line interface."""

import json
import os
import subprocess
import sys

import pytest

from smpl_convert.cli import main


class TestUsageErrors:
    """Argument problems exit 1 with usage text."""

    def test_no_command(self, capsys):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 1
        assert "usage" in capsys.readouterr().err

    def test_body_requires_model(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["body", "--out", "x"])
        assert err.value.code == 1
        assert "--model" in capsys.readouterr().err


class TestBodyCommand:
    """smpl-convert body."""

    def test_converts_and_reports_counts(self, smpl_path, tmp_path,
                                         capsys):
        out = str(tmp_path / "body")
        assert main(["body", "--model", smpl_path, "--out", out]) == 0
        assert "V=6890" in capsys.readouterr().out
        assert os.path.isfile(os.path.join(out, "body.json"))
        assert os.path.isfile(os.path.join(out, "body.bin"))

    def test_unreadable_model_exits_2(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.pkl")
        assert main(["body", "--model", missing,
                     "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err


class TestCaptureCommand:
    """smpl-convert capture."""

    def test_converts_capture(self, capture_dir, tmp_path, capsys):
        out = str(tmp_path / "data")
        assert main(["capture", "--input", capture_dir, "--out", out]) == 0
        assert "3 frames" in capsys.readouterr().out
        with open(os.path.join(out, "dataset.json"), "r",
                  encoding="utf-8") as fh:
            assert json.load(fh)["version"] == 1

    def test_model_flag_also_writes_body(self, capture_dir, smpl_path,
                                         tmp_path):
        """--model converts the SMPL pickle into OUT/body alongside."""
        out = str(tmp_path / "data")
        assert main(["capture", "--input", capture_dir, "--out", out,
                     "--model", smpl_path]) == 0
        assert os.path.isfile(os.path.join(out, "body", "body.json"))
        assert os.path.isfile(os.path.join(out, "dataset.json"))

    def test_bad_capture_exits_2(self, tmp_path, capsys):
        assert main(["capture", "--input", str(tmp_path / "empty"),
                     "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err


class TestEntryPoints:
    """Installed script and -m execution."""

    def test_console_script(self):
        proc = subprocess.run(["smpl-convert", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "COMMAND" in proc.stdout

    def test_module_execution(self):
        proc = subprocess.run([sys.executable, "-m", "smpl_convert.cli",
                               "--help"], capture_output=True, text=True)
        assert proc.returncode == 0

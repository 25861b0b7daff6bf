"""
Tests for fitted-model files.
"""
import json
from dataclasses import replace

import numpy as np
import pytest
from django.core.exceptions import ValidationError

from kriging.services.persistence import FORMAT_NAME, load_fitted_model, save_fitted_model
from kriging.services.predict import predict_many
from kriging.services.solver import solve_blup


class TestModelFiles:
    def test_save_and_load_predicts_identically(self, fitted_model, tmp_path, rng):
        """Test that a reloaded model gives the same predictions."""
        path = tmp_path / "model.npz"
        save_fitted_model(fitted_model, path)
        loaded, header = load_fitted_model(path)
        points = rng.uniform(size=(20, 2))
        np.testing.assert_array_equal(predict_many(loaded, points), predict_many(fitted_model, points))
        assert header["format"] == FORMAT_NAME
        assert loaded.theta_hat.nu == fitted_model.theta_hat.nu
        assert loaded.basis is None

    def test_report_and_transform_in_header(self, small_problem, execution, tmp_path):
        """Test that the solve report and the transform record are stored."""
        p = small_problem
        fitted, report = solve_blup(
            p["locations"], p["responses"], p["trend"], p["basis"], p["model"], method="direct", options=execution
        )
        fitted = replace(fitted, transform={"y": ["log"]})
        header = save_fitted_model(fitted, tmp_path / "model.npz", report)
        loaded, _ = load_fitted_model(tmp_path / "model.npz")
        assert header["report"]["iterations"] == report.iterations
        assert header["basis"]["levels"] == p["basis"].levels
        assert loaded.transform == {"y": ["log"]}

    def test_not_a_model_file(self, tmp_path):
        """Test that an arbitrary file is rejected with model_schema."""
        path = tmp_path / "junk.npz"
        path.write_bytes(b"not an archive")
        with pytest.raises(ValidationError) as exc:
            load_fitted_model(path)
        assert exc.value.code == "model_schema"

    def test_schema_hash_mismatch(self, fitted_model, tmp_path):
        """Test that a header whose schema hash does not match is rejected."""
        path = tmp_path / "model.npz"
        save_fitted_model(fitted_model, path)
        with np.load(path) as archive:
            contents = {name: archive[name] for name in archive.files}
        header = json.loads(str(contents.pop("header")[()]))
        header["schema_hash"] = "0" * 64
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), **contents)
        with pytest.raises(ValidationError) as exc:
            load_fitted_model(path)
        assert "schema hash" in exc.value.params["reason"]

    def test_newer_version_refused(self, fitted_model, tmp_path, settings):
        """Test that a file from a newer format version is refused."""
        path = tmp_path / "model.npz"
        settings.MLKRIG = {**settings.MLKRIG, "MODEL_FORMAT_VERSION": 2}
        save_fitted_model(fitted_model, path)
        settings.MLKRIG = {**settings.MLKRIG, "MODEL_FORMAT_VERSION": 1}
        with pytest.raises(ValidationError) as exc:
            load_fitted_model(path)
        assert "newer" in exc.value.params["reason"]

"""
Tests for imputation error metrics.
"""
import math

import numpy as np
import pandas as pd
import pytest
from django.core.exceptions import ValidationError

from imputation.services.datasets import TabularDataset
from imputation.services.metrics import compute_metrics, score_imputation, truth_for
from imputation.services.transforms import TransformSpec, transform_pipeline


class TestComputeMetrics:
    def test_worked_example(self):
        """Test y = (1, 2), y_hat = (2, 2)."""
        report = compute_metrics([1.0, 2.0], [2.0, 2.0], method="kriging")
        assert report.rmse_rel == pytest.approx(math.sqrt(0.5) / math.sqrt(2.5))
        assert report.rmse_rel == pytest.approx(0.4472, abs=1e-4)
        assert report.mape == pytest.approx(0.5)
        assert report.lnq == pytest.approx(math.log(2) / 2)
        assert report.n_validation == 2

    def test_doubled_predictions(self):
        """Test that y_hat = 2y gives mape 1 and lnq ln 2."""
        y = np.array([1.0, 3.0, 7.5])
        report = compute_metrics(y, 2 * y)
        assert report.mape == pytest.approx(1.0)
        assert report.lnq == pytest.approx(math.log(2))
        assert report.lnq_signed == pytest.approx(math.log(2))

    def test_perfect_prediction(self):
        report = compute_metrics([4.0, 5.0], [4.0, 5.0])
        assert report.rmse_rel == 0.0
        assert report.mape == 0.0
        assert report.lnq == 0.0
        assert report.wasserstein == 0.0

    def test_exclusions_are_counted(self):
        """Test that zero truth, sign changes and missing truth are excluded and counted."""
        report = compute_metrics([0.0, 2.0, -1.0, np.nan, 4.0], [1.0, 2.0, 1.0, 3.0, 4.0])
        assert report.n_validation == 4
        assert report.n_excluded_missing == 1
        assert report.n_excluded_mape == 1
        assert report.n_excluded_lnq == 2
        assert report.lnq == 0.0

    def test_nothing_to_score(self):
        with pytest.raises(ValidationError) as exc:
            compute_metrics([0.0, np.nan], [1.0, 2.0], method="knn")
        assert exc.value.code == "empty_metric"

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError) as exc:
            compute_metrics([1.0, 2.0], [1.0])
        assert exc.value.code == "shape"

    def test_to_dict(self):
        data = compute_metrics([1.0, 2.0], [2.0, 2.0], method="gls").to_dict()
        assert data["method"] == "gls"
        assert set(data) >= {"rmse_rel", "mape", "lnq", "n_validation"}


class TestScoreImputation:
    def dataset(self):
        frame = pd.DataFrame({"x1": [1.0, 2.0, 3.0], "y": [10.0, np.nan, 40.0], "truth": [10.0, 20.0, 40.0]})
        return TabularDataset(frame=frame, response="y", predictors=("x1",))

    def test_truth_column(self):
        """Test that a truth column scores rows whose response is missing."""
        values = pd.Series([25.0], index=[1])
        report = score_imputation(self.dataset(), values, "knn", truth_column="truth")
        assert report.mape == pytest.approx(0.25)

    def test_no_truth(self):
        """Test that rows without any truth give no report."""
        assert score_imputation(self.dataset(), pd.Series([25.0], index=[1]), "knn") is None

    def test_truth_in_original_units(self):
        """Test that the response truth is returned in original units after a log transform."""
        dataset = transform_pipeline(self.dataset(), TransformSpec(steps=(("y", "log"),)))
        np.testing.assert_allclose(truth_for(dataset, [0, 2]), [10.0, 40.0])

"""
Imputation error metrics.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError
from scipy.stats import wasserstein_distance
from sklearn.metrics import mean_absolute_percentage_error, mean_squared_error

from imputation.services.transforms import to_original_units


@dataclass(frozen=True)
class MetricsReport:
    """
    rmse_rel = sqrt(mean((y_hat - y)^2)) / sqrt(mean(y^2))
    mape     = mean(|y_hat - y| / |y|) over rows with y != 0
    lnq      = mean(|ln(y_hat / y)|) over rows with y_hat * y > 0
    lnq_signed is the same mean without the absolute value.
    wasserstein is the W1 distance between the predicted and true values.
    """

    method: str
    rmse_rel: float
    mape: float
    lnq: float
    n_validation: int
    lnq_signed: float = 0.0
    wasserstein: float = 0.0
    n_excluded_missing: int = 0
    n_excluded_mape: int = 0
    n_excluded_lnq: int = 0

    def to_dict(self):
        return asdict(self)


def compute_metrics(y_true, y_pred, method=""):
    """Metrics over rows with an observed truth and a finite prediction."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValidationError(
            "Truth and prediction shapes differ: %(a)s vs %(b)s.",
            code="shape",
            params={"a": y_true.shape, "b": y_pred.shape},
        )

    usable = np.isfinite(y_true) & np.isfinite(y_pred)
    y, yh = y_true[usable], y_pred[usable]
    nonzero = y != 0
    same_sign = y * yh > 0
    if y.size == 0 or not nonzero.any() or not same_sign.any():
        raise ValidationError(
            "No rows left to score for %(method)s (of %(n)d).",
            code="empty_metric",
            params={"method": method or "metrics", "n": len(y_true)},
        )

    rmse_rel = math.sqrt(mean_squared_error(y, yh)) / math.sqrt(float(np.mean(y * y)))
    mape = float(mean_absolute_percentage_error(y[nonzero], yh[nonzero]))
    log_ratio = np.log(yh[same_sign] / y[same_sign])

    return MetricsReport(
        method=method,
        rmse_rel=float(rmse_rel),
        mape=mape,
        lnq=float(np.mean(np.abs(log_ratio))),
        lnq_signed=float(np.mean(log_ratio)),
        wasserstein=float(wasserstein_distance(y, yh)),
        n_validation=int(y.size),
        n_excluded_missing=int((~usable).sum()),
        n_excluded_mape=int((~nonzero).sum()),
        n_excluded_lnq=int((~same_sign).sum()),
    )


@dataclass
class ImputationResult:
    """Imputed values (original units, indexed by row) and their scores when truth exists."""

    method: str
    values: pd.Series = field(repr=False)
    report: MetricsReport = None
    fitted: object = field(default=None, repr=False)
    details: dict = field(default_factory=dict)


def truth_for(dataset, rows, truth_column=None):
    """Ground truth at ``rows`` in original units (NaN where unknown)."""
    if truth_column:
        return dataset.frame.loc[rows, truth_column].to_numpy(dtype=float)
    return to_original_units(dataset, dataset.response, dataset.response_vector(rows))


def score_imputation(dataset, values, method, truth_column=None):
    """MetricsReport for ``values`` against the known truth, or None when there is none."""
    y_true = truth_for(dataset, values.index.to_numpy(), truth_column)
    if not np.isfinite(y_true).any():
        return None
    return compute_metrics(y_true, values.to_numpy(dtype=float), method=method)

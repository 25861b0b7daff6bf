"""
Comparison imputers: trend-only GLS, k-nearest-neighbour mean and local
k-nearest-neighbour regression.
"""
import logging

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy.linalg import cho_factor, cho_solve
from sklearn.metrics import pairwise_distances_chunked
from sklearn.preprocessing import StandardScaler

from imputation.services.datasets import require_complete_predictors
from imputation.services.metrics import ImputationResult, score_imputation
from imputation.services.transforms import to_original_units

logger = logging.getLogger(__name__)


def gls_predict(fitted, points):
    """k(x0)^T beta with the GLS coefficients of a fitted kriging model."""
    return fitted.trend.evaluate(points) @ fitted.beta_hat


def gls_beta_dense(C, X, Y):
    """Reference beta = (X^T C^-1 X)^-1 X^T C^-1 Y through a Cholesky factor of C."""
    factor = cho_factor(np.asarray(C, dtype=float), lower=True)
    CinvX = cho_solve(factor, X)
    return np.linalg.solve(X.T @ CinvX, CinvX.T @ Y)


def _neighbours(train_X, query_X, k):
    """Indices of the k nearest training rows per query in z-scored space; ties go to the lower index."""
    train_X = np.asarray(train_X, dtype=float)
    query_X = np.asarray(query_X, dtype=float)
    n_train = len(train_X)
    if not (1 <= k <= n_train):
        raise ValidationError(
            "k = %(k)d must lie between 1 and the %(n)d training rows.",
            code="parameter_domain",
            params={"k": k, "n": n_train},
        )
    scaler = StandardScaler().fit(train_X)
    train_z, query_z = scaler.transform(train_X), scaler.transform(query_X)

    def nearest(chunk, start):
        return np.argsort(chunk, axis=1, kind="stable")[:, :k]

    if len(query_z) == 0:
        return np.zeros((0, k), dtype=int)
    return np.vstack(list(pairwise_distances_chunked(query_z, train_z, reduce_func=nearest)))


def knn_predict(train_X, train_Y, query_X, k=None):
    k = settings.MLKRIG["KNN_K"] if k is None else int(k)
    idx = _neighbours(train_X, query_X, k)
    return np.asarray(train_Y, dtype=float)[idx].mean(axis=1)


def knn_regression_predict(train_X, train_Y, query_X, k=None):
    """Least squares with intercept on each query's k neighbours, evaluated at the query."""
    k = settings.MLKRIG["KNN_K"] if k is None else int(k)
    train_X = np.asarray(train_X, dtype=float)
    train_Y = np.asarray(train_Y, dtype=float)
    query_X = np.asarray(query_X, dtype=float)
    idx = _neighbours(train_X, query_X, k)

    scaler = StandardScaler().fit(train_X)
    train_z, query_z = scaler.transform(train_X), scaler.transform(query_X)
    out = np.empty(len(query_z))
    for i, (x0, rows) in enumerate(zip(query_z, idx)):
        A = np.column_stack([np.ones(len(rows)), train_z[rows]])
        coef, *_ = np.linalg.lstsq(A, train_Y[rows], rcond=None)
        out[i] = coef[0] + x0 @ coef[1:]
    return out


# =============================================================================
# Dataset-level imputers
# =============================================================================

def _impute_with(dataset, train_rows, query_rows, method, predictor, truth_column):
    require_complete_predictors(dataset, train_rows, "training rows")
    require_complete_predictors(dataset, query_rows, "rows to impute")
    predictions = predictor(
        dataset.predictor_matrix(train_rows),
        dataset.response_vector(train_rows),
        dataset.predictor_matrix(query_rows),
    )
    values = pd.Series(to_original_units(dataset, dataset.response, predictions), index=np.asarray(query_rows))
    report = score_imputation(dataset, values, method, truth_column)
    logger.info("%s imputed %d rows from %d training rows", method, len(values), len(train_rows))
    return ImputationResult(method=method, values=values, report=report)


def baseline_gls(dataset, train_rows, query_rows, fitted, truth_column=None):
    """Trend-only imputation with the GLS coefficients of ``fitted``."""
    return _impute_with(
        dataset,
        train_rows,
        query_rows,
        "gls",
        lambda train_X, train_Y, query_X: gls_predict(fitted, query_X),
        truth_column,
    )


def baseline_knn(dataset, train_rows, query_rows, k=None, truth_column=None):
    return _impute_with(
        dataset,
        train_rows,
        query_rows,
        "knn",
        lambda train_X, train_Y, query_X: knn_predict(train_X, train_Y, query_X, k),
        truth_column,
    )


def baseline_knn_regression(dataset, train_rows, query_rows, k=None, truth_column=None):
    return _impute_with(
        dataset,
        train_rows,
        query_rows,
        "knn-reg",
        lambda train_X, train_Y, query_X: knn_regression_predict(train_X, train_Y, query_X, k),
        truth_column,
    )

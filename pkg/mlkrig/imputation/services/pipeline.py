"""
End-to-end imputation: predictor vectors are treated as locations, the
response as the observed field, and missing (or held-out) responses are
predicted by the multilevel BLUP or one of the baselines.
"""
import logging
from dataclasses import dataclass, replace
from math import comb

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.exceptions import ValidationError

from imputation.services.baselines import baseline_gls, baseline_knn, baseline_knn_regression
from imputation.services.datasets import CsvSchema, load_csv, make_split, require_complete_predictors
from imputation.services.metrics import ImputationResult, score_imputation
from imputation.services.transforms import TransformSpec, to_original_units, transform_pipeline
from kriging.services.design import TrendBasis, build_design_matrix, build_kdtree, default_leaf_min
from kriging.services.execution import make_rng, resolve_options
from kriging.services.kernels import CovarianceModel
from kriging.services.likelihood import LikelihoodConfig, fit_theta, profiled_loglik_W
from kriging.services.mlbasis import apply_W, build_multilevel_basis
from kriging.services.predict import predict_many
from kriging.services.solver import solve_blup

logger = logging.getLogger(__name__)

METHODS = ("kriging", "gls", "knn", "knn-reg")

DEFAULT_SWEEP_SIZES = (2000, 5000, 10000, 50000, 100000)


@dataclass(frozen=True)
class FitConfig:
    """
    Kriging fit settings for tabular data.

    Giving both ``nu`` and ``rho`` fixes theta and skips the likelihood search.
    Tabular predictors often repeat values along an axis, so local trend
    blocks default to the adaptive rank mode.
    """

    degree: int = 1
    nu: float = None
    rho: float = None
    sigma2: float = 1.0
    profile_sigma2: bool = True
    tol: float = 1e-6
    max_iter: int = None
    leaf_min: int = None
    sparse_tau: float = None
    rank_mode: str = "adaptive"
    solve_method: str = "pcg"
    estimation_rows: int = None
    max_evals: int = None
    seed: int = 0
    k: int = None

    @property
    def fixed_theta(self):
        return self.nu is not None and self.rho is not None

    def likelihood_config(self):
        return LikelihoodConfig.from_settings(
            sparse_threshold=self.sparse_tau,
            max_evals=self.max_evals,
            profile_sigma2=self.profile_sigma2,
            sigma2=self.sigma2,
        )

    def trend_size(self, d_loc):
        return comb(d_loc + self.degree, self.degree)


# =============================================================================
# Task presets
# =============================================================================

@dataclass(frozen=True)
class TaskPreset:
    response: str
    predictors: tuple
    transform: TransformSpec = TransformSpec()


TASKS = {
    "totchg": TaskPreset(response="totchg", predictors=("los", "npr", "ndx", "age")),
    "los": TaskPreset(response="los", predictors=("totchg", "npr", "ndx")),
    "log-totchg": TaskPreset(
        response="totchg",
        predictors=("los", "npr", "ndx", "age"),
        transform=TransformSpec(
            steps=(
                ("totchg", "log"),
                ("los", "log"),
                ("npr", "log"),
                ("totchg", "zscore"),
                ("los", "zscore"),
                ("npr", "zscore"),
                ("ndx", "zscore"),
                ("age", "zscore"),
            )
        ),
    ),
}


def task_preset(name):
    try:
        return TASKS[name]
    except KeyError:
        raise ValidationError(
            "Unknown task %(task)r; choose from %(tasks)s.",
            code="parameter_domain",
            params={"task": name, "tasks": sorted(TASKS)},
        )


# =============================================================================
# Kriging fit
# =============================================================================

def merge_duplicate_locations(locations, responses):
    """Average responses over coincident locations; returns (locations, responses, n_merged)."""
    unique, inverse, counts = np.unique(locations, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_merged = len(locations) - len(unique)
    if n_merged == 0:
        return locations, responses, 0
    means = np.bincount(inverse, weights=responses) / counts
    logger.info("Merged %d rows sharing a location with another row", n_merged)
    return unique, means, n_merged


def _estimation_subset(locations, responses, config):
    limit = config.estimation_rows or settings.MLKRIG["ESTIMATION_ROWS"]
    if len(locations) <= limit:
        return locations, responses
    rows = np.sort(make_rng(config.seed, 3).choice(len(locations), limit, replace=False))
    logger.info("Estimating theta on %d of %d training rows", limit, len(locations))
    return locations[rows], responses[rows]


def _build_basis(trend, locations, config, options):
    X = build_design_matrix(trend, locations)
    leaf_min = config.leaf_min or default_leaf_min(trend.p)
    tree = build_kdtree(locations, leaf_min)
    return build_multilevel_basis(X, tree, rank_mode=config.rank_mode, options=options)


def fit_kriging_model(locations, responses, config=None, options=None):
    """
    Estimate (or fix) theta, then solve the BLUP system on all rows.

    Returns (FittedModel, details) where details holds the theta source, the
    likelihood trace (when estimated), the solve report and the merge count.
    """
    config = config or FitConfig()
    options = resolve_options(options)
    locations = np.asarray(locations, dtype=float)
    responses = np.asarray(responses, dtype=float)
    locations, responses, n_merged = merge_duplicate_locations(locations, responses)

    trend = TrendBasis.total_degree(locations.shape[1], config.degree, locations)
    basis = _build_basis(trend, locations, config, options)
    lik_config = config.likelihood_config()

    trace = None
    if config.fixed_theta:
        theta = CovarianceModel(nu=config.nu, rho=config.rho, sigma2=config.sigma2)
        if config.profile_sigma2:
            _, sigma2 = profiled_loglik_W(apply_W(basis, responses), basis, locations, theta, lik_config, options)
            theta = theta.with_sigma2(sigma2)
        source = "fixed-theta"
    else:
        est_locations, est_responses = _estimation_subset(locations, responses, config)
        est_basis = basis
        if len(est_locations) < len(locations):
            est_basis = _build_basis(trend, est_locations, config, options)
        theta, trace = fit_theta(est_locations, est_responses, trend, est_basis, lik_config, options)
        source = "estimated"

    fitted, report = solve_blup(
        locations,
        responses,
        trend,
        basis,
        theta,
        tol=config.tol,
        max_iter=config.max_iter,
        method=config.solve_method,
        options=options,
    )
    fitted = replace(fitted, theta_source=source, sigma2_profiled=config.profile_sigma2)
    details = {"theta_source": source, "trace": trace, "solve_report": report, "n_merged": n_merged}
    return fitted, details


def _transform_record(dataset):
    return dataset.transform.to_dict() if dataset.transform is not None else None


def impute_kriging(dataset, train_rows=None, query_rows=None, config=None, fitted=None, truth_column=None,
                   options=None):
    """
    Fit on ``train_rows`` (default: rows with an observed response) and predict
    ``query_rows`` (default: rows with a missing response). A previously
    fitted model can be passed to skip fitting.
    """
    config = config or FitConfig()
    train_rows = dataset.observed_rows() if train_rows is None else np.asarray(train_rows)
    query_rows = dataset.missing_rows() if query_rows is None else np.asarray(query_rows)
    require_complete_predictors(dataset, query_rows, "rows to impute")

    details = {}
    if fitted is None:
        require_complete_predictors(dataset, train_rows, "training rows")
        fitted, details = fit_kriging_model(
            dataset.predictor_matrix(train_rows), dataset.response_vector(train_rows), config, options
        )
        fitted = replace(fitted, transform=_transform_record(dataset))

    predictions = predict_many(fitted, dataset.predictor_matrix(query_rows), options)
    values = pd.Series(to_original_units(dataset, dataset.response, predictions), index=query_rows)
    report = score_imputation(dataset, values, "kriging", truth_column)
    logger.info("kriging imputed %d rows (theta: nu=%.4g, rho=%.4g, sigma2=%.4g)", len(values),
                fitted.theta_hat.nu, fitted.theta_hat.rho, fitted.theta_hat.sigma2)
    return ImputationResult(method="kriging", values=values, report=report, fitted=fitted, details=details)


# =============================================================================
# Protocols
# =============================================================================

def expand_methods(method):
    methods = METHODS if method == "all" else tuple(m.strip() for m in str(method).split(","))
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValidationError(
            "Unknown methods %(unknown)s; choose from %(methods)s or 'all'.",
            code="parameter_domain",
            params={"unknown": unknown, "methods": list(METHODS)},
        )
    return methods


def run_methods(methods, dataset, train_rows, query_rows, config=None, fitted=None, truth_column=None,
                options=None):
    """One ImputationResult per method, in the order given; gls reuses the kriging fit."""
    config = config or FitConfig()
    results = []
    for method in methods:
        if method == "kriging":
            result = impute_kriging(dataset, train_rows, query_rows, config, fitted, truth_column, options)
            fitted = result.fitted
        elif method == "gls":
            if fitted is None:
                require_complete_predictors(dataset, train_rows, "training rows")
                fitted, _ = fit_kriging_model(
                    dataset.predictor_matrix(train_rows), dataset.response_vector(train_rows), config, options
                )
            result = baseline_gls(dataset, train_rows, query_rows, fitted, truth_column)
        elif method == "knn":
            result = baseline_knn(dataset, train_rows, query_rows, config.k, truth_column)
        else:
            result = baseline_knn_regression(dataset, train_rows, query_rows, config.k, truth_column)
        results.append(result)
    return results


def run_split_protocol(dataset, methods, train_fraction=0.9, seed=0, config=None, transform=None,
                       include_missing=False, options=None):
    """
    Hold out a seeded validation share of the observed rows and score each
    method on it. ``transform`` is fitted on the training rows only.
    Returns (results, train_rows, validation_rows).
    """
    config = config or FitConfig()
    min_train = config.trend_size(len(dataset.predictors))
    train, validation = make_split(dataset, train_fraction, seed, min_train=min_train)
    if transform is not None and not transform.is_identity:
        dataset = transform_pipeline(dataset, transform, train_rows=train)
        kept = dataset.frame.index.to_numpy()
        train = np.intersect1d(train, kept)
        validation = np.intersect1d(validation, kept)
    query = validation
    if include_missing:
        query = np.union1d(validation, dataset.missing_rows())
    results = run_methods(methods, dataset, train, query, config, options=options)
    return results, train, validation


def impute_size_sweep(dataset, sizes=DEFAULT_SWEEP_SIZES, methods=METHODS, train_fraction=0.9, seed=0,
                      config=None, transform=None, options=None):
    """
    The split protocol on seeded row subsets of each size. Sizes larger than
    the number of observed rows are skipped with a warning. Returns one record
    per (size, method) with the metrics fields.
    """
    observed = dataset.observed_rows()
    records = []
    for size in sizes:
        if size > len(observed):
            logger.warning("Skipping size %d: only %d observed rows", size, len(observed))
            continue
        rows = np.sort(make_rng(seed, 4, size).choice(observed, size, replace=False))
        results, _, _ = run_split_protocol(
            dataset.subset(rows), methods, train_fraction, seed, config, transform, options=options
        )
        for result in results:
            record = {"size": int(size)}
            record.update(result.report.to_dict() if result.report else {"method": result.method})
            records.append(record)
    return records


# =============================================================================
# Command support
# =============================================================================

def fit_config_from(run_config):
    """FitConfig from a kriging.config.RunConfig."""
    return FitConfig(
        degree=run_config.degree,
        nu=run_config.nu,
        rho=run_config.rho,
        sigma2=run_config.sigma2,
        profile_sigma2=run_config.profile_sigma2,
        tol=run_config.tol,
        max_iter=run_config.max_iter,
        leaf_min=run_config.leaf_min,
        sparse_tau=run_config.sparse_tau,
        solve_method=run_config.solve_method,
        max_evals=run_config.max_evals,
        seed=run_config.seed,
        k=run_config.k,
    )


def load_task_dataset(path, task=None, response=None, predictors=(), missing_sentinel=None, truth=None):
    """
    Load ``path`` with roles from ``task`` (explicit response/predictors win).
    Returns (dataset, TransformSpec of the task).
    """
    preset = task_preset(task) if task else None
    response = response or (preset.response if preset else None)
    predictors = tuple(predictors) or (preset.predictors if preset else ())
    if not response or not predictors:
        raise ValidationError(
            "A response and at least one predictor are required (give them or a task).",
            code="schema",
        )
    schema = CsvSchema(response=response, predictors=predictors, missing_sentinel=missing_sentinel, truth=truth)
    dataset = load_csv(path, schema)
    return dataset, (preset.transform if preset else TransformSpec())

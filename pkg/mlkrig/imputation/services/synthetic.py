"""
Seeded synthetic tables.

``generate_synthetic_medical`` is a stand-in for inpatient records with the
columns los, npr, ndx, age and totchg. Predictors are continuous and
positive. log(totchg) is a linear trend in the predictors plus a latent
Matérn field over the standardized predictors, drawn with random Fourier
features: frequencies follow the Matérn spectral density (a multivariate
Student-t with 2*nu degrees of freedom and scale 1/rho), and the field is
sqrt(2/M) * sum_m a_m cos(omega_m . z + b_m) with a_m standard normal and
b_m uniform on [0, 2 pi). Response cells go missing independently at
``missing_rate``.

``generate_gp_table`` draws responses exactly from the kriging model
(linear trend plus a Matérn field, factored by Cholesky) at uniform
predictor locations.
"""
import logging

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError
from scipy.linalg import LinAlgError, cholesky

from imputation.services.datasets import TabularDataset
from kriging.services.execution import make_rng
from kriging.services.kernels import CovarianceModel, assemble_covariance

logger = logging.getLogger(__name__)

MEDICAL_COLUMNS = ("los", "npr", "ndx", "age", "totchg")
MEDICAL_PREDICTORS = ("los", "npr", "ndx", "age")

# Share of missing total charges in the inpatient sample the generator imitates.
DEFAULT_MISSING_RATE = 0.0208

FOURIER_FEATURES = 256


def _check_rate(rate):
    if not (0.0 <= rate < 1.0):
        raise ValidationError("missing_rate must lie in [0, 1).", code="parameter_domain")


def matern_fourier_field(z, nu, rho, n_features, rng):
    """One draw of an approximately Matérn(nu, rho) unit-variance field at rows of z."""
    d = z.shape[1]
    g = rng.standard_normal((n_features, d))
    u = rng.chisquare(2.0 * nu, size=(n_features, 1))
    omega = g / rho * np.sqrt(2.0 * nu / u)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    amplitude = rng.standard_normal(n_features)
    features = np.sqrt(2.0 / n_features) * np.cos(z @ omega.T + phase)
    return features @ amplitude


def generate_synthetic_medical(n_rows, seed, missing_rate=DEFAULT_MISSING_RATE, nu=1.5, rho=1.0,
                               field_scale=0.6, n_features=FOURIER_FEATURES):
    if n_rows < 1:
        raise ValidationError("n_rows must be positive.", code="parameter_domain")
    _check_rate(missing_rate)
    rng = make_rng(seed, 10)

    los = rng.lognormal(mean=1.2, sigma=0.6, size=n_rows)
    npr = rng.gamma(shape=2.0, scale=1.0, size=n_rows)
    ndx = 1.0 + rng.gamma(shape=4.0, scale=2.0, size=n_rows)
    age = rng.uniform(18.0, 90.0, size=n_rows)
    predictors = np.column_stack([los, npr, ndx, age])

    z = (predictors - predictors.mean(axis=0)) / predictors.std(axis=0)
    latent = matern_fourier_field(z, nu, rho, n_features, rng)
    log_charge = (
        8.0 + 0.35 * np.log(los) + 0.12 * npr + 0.03 * ndx + 0.004 * age
        + field_scale * latent + 0.05 * rng.standard_normal(n_rows)
    )
    totchg = np.exp(log_charge)

    missing = rng.random(n_rows) < missing_rate
    totchg[missing] = np.nan

    frame = pd.DataFrame({"los": los, "npr": npr, "ndx": ndx, "age": age, "totchg": totchg})
    logger.info("Generated %d synthetic records (%d missing totchg)", n_rows, int(missing.sum()))
    return TabularDataset(frame=frame, response="totchg", predictors=MEDICAL_PREDICTORS)


def generate_gp_table(n_rows, seed, n_predictors=4, nu=1.5, rho=0.5, sigma2=1.0, trend=None, missing_rate=0.0):
    """
    Columns x1..xd uniform on [0, 1] and y = 1 + trend . x + Matérn field.

    ``trend`` defaults to (1, -0.5, 0.25, ...) over the predictors.
    """
    if n_rows < 1 or n_predictors < 1:
        raise ValidationError("n_rows and n_predictors must be positive.", code="parameter_domain")
    _check_rate(missing_rate)
    rng = make_rng(seed, 11)
    X = rng.uniform(0.0, 1.0, size=(n_rows, n_predictors))
    if trend is None:
        trend = np.array([(-0.5) ** j for j in range(n_predictors)])
    model = CovarianceModel(nu=nu, rho=rho, sigma2=sigma2)

    cov = assemble_covariance(X, model)
    try:
        factor = cholesky(cov, lower=True)
    except LinAlgError:
        logger.warning("Covariance of the synthetic draw is numerically singular; adding 1e-10 jitter")
        cov[np.diag_indices_from(cov)] += 1e-10 * sigma2
        factor = cholesky(cov, lower=True)
    y = 1.0 + X @ np.asarray(trend, dtype=float) + factor @ rng.standard_normal(n_rows)

    missing = rng.random(n_rows) < missing_rate
    y[missing] = np.nan

    names = tuple(f"x{j + 1}" for j in range(n_predictors))
    frame = pd.DataFrame(X, columns=names)
    frame["y"] = y
    return TabularDataset(frame=frame, response="y", predictors=names)

"""
BLUP prediction and kriging mean-squared error at new locations.
"""
import logging
import weakref
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve

from kriging.exceptions import NotPositiveDefinite, NumericalBreakdown
from kriging.services.design import build_design_matrix, eval_basis
from kriging.services.execution import resolve_options
from kriging.services.kernels import as_locations, assemble_covariance, cross_covariance

logger = logging.getLogger(__name__)

# Negative variances down to this multiple of sigma2 are treated as roundoff.
MSE_CLAMP_RTOL = 1e-10

# FittedModel -> KrigingVariance
_evaluators = weakref.WeakKeyDictionary()


@dataclass(frozen=True, eq=False)
class Prediction:
    x0: np.ndarray = field(repr=False)
    y_hat: float
    mse: float = None


def predict(model, x0, with_mse=False):
    """y_hat = k(x0)^T beta + c(x0)^T gamma with the fitted gamma and beta."""
    x0 = np.asarray(x0, dtype=float)
    k = eval_basis(model.trend, x0)
    c = cross_covariance(model.locations, x0, model.theta_hat)
    y_hat = float(k @ model.beta_hat + c @ model.gamma_hat)
    mse = predict_mse(model, x0) if with_mse else None
    return Prediction(x0=x0, y_hat=y_hat, mse=mse)


def predict_many(model, points, options=None):
    """Predictions at a batch of points, evaluated in row blocks."""
    options = resolve_options(options)
    points = as_locations(points, model.trend.d_loc)
    if len(points) == 0:
        return np.zeros(0)

    def block(start):
        chunk = points[start : start + options.block_rows]
        c = cross_covariance(model.locations, chunk, model.theta_hat)
        return model.trend.evaluate(chunk) @ model.beta_hat + c.T @ model.gamma_hat

    starts = range(0, len(points), options.block_rows)
    return np.concatenate(options.map(block, starts))


class KrigingVariance:
    """
    Universal-kriging MSE for one fitted model, factoring C once.

    mse(x0) = sigma2 * (1 + u^T (X^T R^-1 X)^-1 u - r^T R^-1 r) with R the unit
    variance correlation matrix, r = R(x, x0) and u = X^T R^-1 r - k(x0).
    """

    def __init__(self, model):
        self.locations = model.locations
        self.trend = model.trend
        self.sigma2 = model.theta_hat.sigma2
        self.correlation = model.theta_hat.correlation_form()
        self.X = build_design_matrix(model.trend, model.locations)
        try:
            self._chol = cho_factor(assemble_covariance(model.locations, self.correlation), lower=True)
            RinvX = cho_solve(self._chol, self.X)
            self._gls = cho_factor(self.X.T @ RinvX, lower=True)
        except LinAlgError as exc:
            raise NotPositiveDefinite(f"Covariance factorization for the MSE failed: {exc}") from exc

    @classmethod
    def for_model(cls, model):
        """The evaluator of ``model``, factored on first use and kept while the model lives."""
        evaluator = _evaluators.get(model)
        if evaluator is None:
            evaluator = _evaluators[model] = cls(model)
        return evaluator

    def _terms(self, x0):
        r = cross_covariance(self.locations, x0, self.correlation)
        k = eval_basis(self.trend, x0)
        Rinv_r = cho_solve(self._chol, r)
        u = self.X.T @ Rinv_r - k
        return r, Rinv_r, u

    def weights(self, x0):
        """Kriging weights lambda with X^T lambda = k(x0)."""
        r, _, u = self._terms(np.asarray(x0, dtype=float))
        return cho_solve(self._chol, r - self.X @ cho_solve(self._gls, u))

    def raw(self, x0):
        r, Rinv_r, u = self._terms(np.asarray(x0, dtype=float))
        return self.sigma2 * (1.0 + u @ cho_solve(self._gls, u) - r @ Rinv_r)

    def __call__(self, x0):
        value = self.raw(x0)
        if value >= 0:
            return float(value)
        if value >= -MSE_CLAMP_RTOL * self.sigma2:
            logger.debug("Clamped MSE %.3e to zero", value)
            return 0.0
        raise NumericalBreakdown(f"Kriging MSE {value:.3e} is negative beyond roundoff")


def _dense_feasible(model, dense_max):
    dense_max = settings.MLKRIG["DENSE_FALLBACK_N"] if dense_max is None else dense_max
    return model.n <= dense_max


def predict_mse(model, x0, dense_max=None):
    """Kriging MSE at x0, or None when N exceeds the dense fallback size."""
    if not _dense_feasible(model, dense_max):
        return None
    return KrigingVariance.for_model(model)(x0)


def predict_mse_many(model, points, dense_max=None):
    """MSE at a batch of points; None when N exceeds the dense fallback size."""
    if not _dense_feasible(model, dense_max):
        logger.info("MSE unavailable: N=%d exceeds the dense fallback size", model.n)
        return None
    points = as_locations(points, model.trend.d_loc)
    evaluator = KrigingVariance.for_model(model)
    raw = np.array([evaluator.raw(x) for x in points])
    clamped = (raw < 0) & (raw >= -MSE_CLAMP_RTOL * evaluator.sigma2)
    if np.any(raw < -MSE_CLAMP_RTOL * evaluator.sigma2):
        raise NumericalBreakdown(f"Kriging MSE {raw.min():.3e} is negative beyond roundoff")
    if clamped.any():
        logger.warning("Clamped %d slightly negative MSE values to zero", int(clamped.sum()))
    return np.maximum(raw, 0.0)


def universal_kriging_dense(C, X, c, k, Y, sigma2):
    """
    Reference prediction and MSE from the bordered kriging system.

    [[C, X], [X^T, 0]] [lambda; m] = [c; k]; y_hat = lambda^T Y and
    mse = sigma2 - lambda^T c - m^T k.
    """
    C = np.asarray(C, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    K = np.zeros((n + p, n + p))
    K[:n, :n] = C
    K[:n, n:] = X
    K[n:, :n] = X.T
    rhs = np.concatenate([c, k])
    sol = solve(K, rhs, assume_a="sym")
    lam, m = sol[:n], sol[n:]
    return float(lam @ Y), float(sigma2 - lam @ c - m @ k)

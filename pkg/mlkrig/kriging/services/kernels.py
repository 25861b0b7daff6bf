"""
Matérn covariance evaluation, covariance assembly and direct matvecs.
"""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from django.core.exceptions import ValidationError
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist, squareform
from scipy.special import gammaln, kve

from kriging.services.execution import resolve_options

logger = logging.getLogger(__name__)

# Beyond this scaled distance the kernel is below double-precision underflow.
UNDERFLOW_Z = 700.0

# Closed forms are used for nu = n + 1/2 with n up to this order.
HALF_INTEGER_MAX_ORDER = 8


@dataclass(frozen=True)
class CovarianceModel:
    """Matérn shape ``nu``, correlation length ``rho`` and variance scale ``sigma2``."""

    nu: float
    rho: float
    sigma2: float = 1.0

    def __post_init__(self):
        for name in ("nu", "rho", "sigma2"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float, np.floating)) and math.isfinite(value) and value > 0):
                raise ValidationError(
                    "Covariance parameter %(name)s must be finite and positive, got %(value)r.",
                    code="parameter_domain",
                    params={"name": name, "value": value},
                )

    @property
    def theta(self):
        return (self.nu, self.rho)

    def correlation_form(self):
        """Same shape and length with unit variance."""
        return replace(self, sigma2=1.0)

    def with_sigma2(self, sigma2):
        return replace(self, sigma2=float(sigma2))


def _half_integer_order(nu):
    n = nu - 0.5
    if n >= 0 and float(n).is_integer() and n <= HALF_INTEGER_MAX_ORDER:
        return int(n)
    return None


def _matern_closed_form(z, n):
    """Unit-variance Matérn at scaled distance z for nu = n + 1/2."""
    z = np.asarray(z, dtype=float)
    poly = np.zeros_like(z)
    for i in range(n + 1):
        coef = math.factorial(n + i) / (math.factorial(i) * math.factorial(n - i))
        poly += coef * (2.0 * z) ** (n - i)
    return math.factorial(n) / math.factorial(2 * n) * poly * np.exp(-z)


def _matern_bessel(z, nu):
    """Unit-variance Matérn at scaled distance z > 0 through K_nu."""
    z = np.asarray(z, dtype=float)
    log_coef = (1.0 - nu) * math.log(2.0) - gammaln(nu)
    # kve(nu, z) = K_nu(z) * exp(z)
    return np.exp(log_coef + nu * np.log(z) - z) * kve(nu, z)


def _correlation(z, nu):
    n = _half_integer_order(nu)
    if n is not None:
        return _matern_closed_form(z, n)
    return _matern_bessel(z, nu)


def matern(r, model):
    """
    Matérn covariance at distance(s) ``r``.

    sigma2 * 2^(1-nu)/Gamma(nu) * (sqrt(2 nu) r / rho)^nu * K_nu(sqrt(2 nu) r / rho),
    with the r = 0 limit returned exactly as sigma2. Accepts scalars or arrays.
    """
    r_arr = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r_arr)) or np.any(r_arr < 0):
        raise ValidationError(
            "Distances must be finite and nonnegative.", code="parameter_domain"
        )

    z = math.sqrt(2.0 * model.nu) * r_arr / model.rho
    out = np.zeros_like(z)
    out[z == 0] = 1.0
    mid = (z > 0) & (z <= UNDERFLOW_Z)
    if np.any(mid):
        out[mid] = _correlation(z[mid], model.nu)
    out *= model.sigma2

    if np.ndim(r) == 0:
        return float(out)
    return out


def as_locations(locations, d_loc=None):
    """Coerce to a float (N, d) array; a 1-D input is read as N points in R^1."""
    arr = np.asarray(locations, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValidationError("Locations must be a 2-D array.", code="shape")
    if d_loc is not None and arr.shape[1] != d_loc:
        raise ValidationError(
            "Expected points of dimension %(expected)d, got %(got)d.",
            code="shape",
            params={"expected": d_loc, "got": arr.shape[1]},
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError("Locations must be finite.", code="parameter_domain")
    return arr


def _as_point(x0, d_loc):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        if x0.shape[0] != d_loc:
            raise ValidationError(
                "Expected a point of dimension %(expected)d, got %(got)d.",
                code="shape",
                params={"expected": d_loc, "got": x0.shape[0]},
            )
        return x0[None, :], True
    return as_locations(x0, d_loc), False


def check_distinct(locations):
    """Raise degenerate_input when two locations coincide."""
    pairs = cKDTree(locations).query_pairs(r=0.0, output_type="ndarray")
    if len(pairs):
        i, j = sorted(pairs[0])
        raise ValidationError(
            "Locations %(i)d and %(j)d coincide; the covariance matrix would be singular "
            "(%(count)d duplicate pairs).",
            code="degenerate_input",
            params={"i": int(i), "j": int(j), "count": len(pairs)},
        )


def assemble_covariance(locations, model):
    """Dense C(theta); each off-diagonal entry is evaluated once and mirrored."""
    locations = as_locations(locations)
    n = len(locations)
    if n < 1:
        raise ValidationError("At least one location is required.", code="insufficient_data")
    if n == 1:
        return np.array([[model.sigma2]])

    dist = pdist(locations)
    if np.any(dist == 0):
        check_distinct(locations)
    cov = squareform(matern(dist, model))
    np.fill_diagonal(cov, model.sigma2)
    return cov


def cross_covariance(locations, x0, model):
    """c(theta) between the observations and ``x0`` (or columns for a batch of points)."""
    locations = as_locations(locations)
    points, single = _as_point(x0, locations.shape[1])
    c = matern(cdist(locations, points), model)
    return c[:, 0] if single else c


class CovarianceOperator:
    """
    Matvecs with C(theta) for one set of locations.

    C is materialized once when it fits in the memory budget; otherwise each
    product recomputes kernel rows block by block. Row blocks are independent,
    so threading over them does not change the result.
    """

    def __init__(self, locations, model, options=None):
        self.locations = as_locations(locations)
        self.model = model
        self.options = resolve_options(options)
        self.n = len(self.locations)
        self.matvec_count = 0

        budget_bytes = self.options.memory_budget_mb * 1024 * 1024
        self._dense = None
        if self.n * self.n * 8 <= budget_bytes:
            self._dense = assemble_covariance(self.locations, model)
        else:
            check_distinct(self.locations)
            logger.info(
                "Covariance of %d points exceeds the %d MB budget; using row-blocked matvecs",
                self.n,
                self.options.memory_budget_mb,
            )

    @property
    def shape(self):
        return (self.n, self.n)

    @property
    def is_dense(self):
        return self._dense is not None

    def dense(self):
        """The full matrix (assembled on demand when not cached)."""
        if self._dense is not None:
            return self._dense
        return assemble_covariance(self.locations, self.model)

    def submatrix(self, rows, cols):
        if self._dense is not None:
            return self._dense[np.ix_(rows, cols)]
        return matern(cdist(self.locations[rows], self.locations[cols]), self.model)

    def _block(self, start, v):
        stop = min(start + self.options.block_rows, self.n)
        if self._dense is not None:
            return self._dense[start:stop] @ v
        kernel = matern(cdist(self.locations[start:stop], self.locations), self.model)
        return kernel @ v

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise ValidationError(
                "Vector length %(got)d does not match %(n)d locations.",
                code="shape",
                params={"got": v.shape[0], "n": self.n},
            )
        self.matvec_count += 1
        starts = range(0, self.n, self.options.block_rows)
        blocks = self.options.map(lambda s: self._block(s, v), starts)
        if not blocks:
            return np.zeros_like(v)
        return np.concatenate(blocks, axis=0)


def cov_matvec(locations, model, v, options=None):
    """C(theta) @ v without materializing C beyond the memory budget."""
    return CovarianceOperator(locations, model, options).matvec(v)

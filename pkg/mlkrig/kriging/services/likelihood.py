"""
Decoupled log-likelihood of the multilevel coefficients and estimation of theta.

Because W X = 0 the trend drops out of Y_W = W Y, so the likelihood of Y_W
depends on (nu, rho, sigma2) only. With sigma2 profiled the search runs over
log(nu) and log(rho).
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import scipy.sparse as sp
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.sparse.linalg import splu
from scipy.spatial.distance import pdist

from kriging.exceptions import EstimationFailed, NotPositiveDefinite, NumericalBreakdown
from kriging.services.execution import make_rng, resolve_options
from kriging.services.kernels import CovarianceModel, CovarianceOperator, as_locations
from kriging.services.mlbasis import apply_W
from kriging.services.solver import MultilevelOperator

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

# Objective value handed to the optimizer for infeasible parameters.
INFEASIBLE_PENALTY = 1e30

MEDIAN_DISTANCE_SAMPLE = 2000


@dataclass(frozen=True)
class LikelihoodConfig:
    """
    Settings for likelihood evaluation and the theta search.

    ``sparse_threshold`` is tau: C_W entries between W-row supports farther
    apart than tau * rho are dropped. 0 and inf both mean the dense C_W.
    ``rho_bounds`` of None means 1e-3 to 1e3 times the median pairwise
    distance of the locations.
    """

    sparse_threshold: float = 3.0
    nu_bounds: tuple = (0.25, 4.0)
    rho_bounds: tuple = None
    max_evals: int = 200
    dense_fallback_n: int = 2000
    profile_sigma2: bool = True
    sigma2: float = 1.0
    nu0: float = None
    rho0: float = None

    def __post_init__(self):
        tau = self.sparse_threshold
        if tau is None or math.isnan(tau) or tau < 0:
            raise ValidationError("sparse_threshold must be >= 0.", code="parameter_domain")
        for name in ("nu_bounds", "rho_bounds"):
            bounds = getattr(self, name)
            if bounds is None:
                continue
            lo, hi = bounds
            if not (math.isfinite(lo) and math.isfinite(hi) and 0 < lo < hi):
                raise ValidationError(
                    "%(name)s must satisfy 0 < lower < upper < inf, got %(bounds)s.",
                    code="parameter_domain",
                    params={"name": name, "bounds": bounds},
                )
        if self.max_evals < 1:
            raise ValidationError("max_evals must be positive.", code="parameter_domain")

    @classmethod
    def from_settings(cls, **overrides):
        cfg = settings.MLKRIG
        base = cls(
            sparse_threshold=cfg["SPARSE_TAU"],
            max_evals=cfg["MAX_EVALS"],
            dense_fallback_n=cfg["DENSE_FALLBACK_N"],
        )
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(base, **overrides) if overrides else base

    @property
    def uses_dense_cw(self):
        return self.sparse_threshold == 0 or math.isinf(self.sparse_threshold)

    def resolved_rho_bounds(self, locations):
        if self.rho_bounds is not None:
            return self.rho_bounds
        median = median_distance(locations)
        return (1e-3 * median, 1e3 * median)


def median_distance(locations, seed=0):
    locations = as_locations(locations)
    if len(locations) > MEDIAN_DISTANCE_SAMPLE:
        rows = make_rng(seed, 1).choice(len(locations), MEDIAN_DISTANCE_SAMPLE, replace=False)
        locations = locations[np.sort(rows)]
    dist = pdist(locations)
    dist = dist[dist > 0]
    return float(np.median(dist)) if dist.size else 1.0


# =============================================================================
# Sparsified C_W
# =============================================================================

def _bbox_gaps(lo, hi, a):
    gap = np.maximum(0.0, np.maximum(lo - hi[a], lo[a] - hi))
    return np.sqrt(np.sum(gap * gap, axis=1))


def _block_panel(block, near_blocks, W, cov, block_rows):
    """C_W entries between the rows of ``block`` and the rows of ``near_blocks``."""
    rows = np.concatenate([np.arange(b.start, b.stop) for b in near_blocks])
    cols = np.unique(np.concatenate([b.support for b in near_blocks]))
    left = np.zeros((block.n_rows, len(cols)))
    for start in range(0, len(block.support), block_rows):
        chunk = slice(start, start + block_rows)
        left += block.coef[:, chunk] @ cov.submatrix(block.support[chunk], cols)
    return rows, np.asarray(W[rows][:, cols] @ left.T).T


def sparsify_CW(basis, locations, model, tau, options=None, cov=None):
    """
    C_W restricted to pairs of W-row blocks whose supports are close.

    Entry (i, j) is kept when the bounding boxes of the supports of rows i and
    j are within tau * rho of each other (inf keeps everything). Rows emitted
    by one tree node share a support, so the test runs per node pair. The
    diagonal blocks are always kept and the pattern is symmetric.

    Only kept entries are computed. Kernel values are drawn ``block_rows``
    support points at a time against the union of the neighbours' supports,
    so nothing larger than block_rows x N is formed.
    """
    if tau is None or tau < 0:
        raise ValidationError("tau must be >= 0.", code="parameter_domain")
    options = resolve_options(options)
    locations = as_locations(locations)
    cov = cov if cov is not None else CovarianceOperator(locations, model, options)
    blocks = basis.row_blocks
    n_w = basis.n_w
    if not blocks:
        return sp.csr_matrix((n_w, n_w))

    lo = np.array([locations[b.support].min(axis=0) for b in blocks])
    hi = np.array([locations[b.support].max(axis=0) for b in blocks])
    cutoff = math.inf if math.isinf(tau) else tau * model.rho
    near = [np.flatnonzero(_bbox_gaps(lo, hi, a) <= cutoff) for a in range(len(blocks))]

    def panel(a):
        return _block_panel(blocks[a], [blocks[b] for b in near[a]], basis.W, cov, options.block_rows)

    rr, cc, vv = [], [], []
    for a, (rows, values) in enumerate(options.map(panel, range(len(blocks)))):
        block = blocks[a]
        r, c = np.meshgrid(np.arange(block.start, block.stop), rows, indexing="ij")
        rr.append(r.ravel())
        cc.append(c.ravel())
        vv.append(values.ravel())
    matrix = sp.csr_matrix((np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))), shape=(n_w, n_w))
    matrix = ((matrix + matrix.T) * 0.5).tocsr()

    logger.debug("Sparsified C_W: tau=%s, nnz=%d of %d", tau, matrix.nnz, n_w * n_w)
    return matrix


# =============================================================================
# Log-likelihood
# =============================================================================

@dataclass(frozen=True)
class LikelihoodParts:
    n: int
    logdet: float
    quad: float

    def loglik(self, sigma2=1.0):
        """Log-density with C_W scaled by sigma2."""
        return -0.5 * (self.n * LOG_2PI + self.logdet + self.n * math.log(sigma2) + self.quad / sigma2)

    @property
    def sigma2_hat(self):
        return self.quad / self.n

    def profiled(self):
        return self.loglik(self.sigma2_hat)


def _dense_parts(matrix, y):
    try:
        factor = cho_factor(matrix, lower=True)
    except LinAlgError as exc:
        raise NotPositiveDefinite(f"Cholesky of C_W failed: {exc}") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    quad = float(y @ cho_solve(factor, y))
    return logdet, quad


def _sparse_parts(matrix, y):
    try:
        lu = splu(
            sp.csc_matrix(matrix),
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:
        raise NotPositiveDefinite(f"Sparse factorization of C_W failed: {exc}") from exc
    diag = lu.U.diagonal()
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise NotPositiveDefinite("Sparse factorization of C_W has a nonpositive pivot")
    logdet = float(np.sum(np.log(diag)))
    quad = float(y @ lu.solve(y))
    return logdet, quad


def likelihood_parts(Y_W, basis, locations, model, config, options=None):
    """log det(C~_W) and Y_W^T C~_W^-1 Y_W from one symmetric factorization."""
    y = np.asarray(Y_W, dtype=float)
    n = len(y)
    if n != basis.n_w:
        raise ValidationError(
            "Y_W has length %(got)d, expected %(n)d.",
            code="shape",
            params={"got": n, "n": basis.n_w},
        )
    if n == 0:
        return LikelihoodParts(n=0, logdet=0.0, quad=0.0)

    options = resolve_options(options)
    cov = CovarianceOperator(locations, model, options)
    if config.uses_dense_cw:
        logdet, quad = _dense_parts(MultilevelOperator(basis, cov).dense(), y)
    else:
        sparse = sparsify_CW(basis, locations, model, config.sparse_threshold, options=options, cov=cov)
        if n <= config.dense_fallback_n:
            logdet, quad = _dense_parts(sparse.toarray(), y)
        else:
            logdet, quad = _sparse_parts(sparse, y)
    return LikelihoodParts(n=n, logdet=logdet, quad=quad)


def loglik_W(Y_W, basis, locations, model, config, options=None):
    """
    -(n/2) log(2 pi) - 1/2 log det(C~_W) - 1/2 Y_W^T C~_W^-1 Y_W with n = N - p.

    ``model.sigma2`` scales the kernel as given; use ``profiled_loglik_W`` for
    the version with sigma2 replaced by its closed-form maximizer.
    """
    parts = likelihood_parts(Y_W, basis, locations, model, config, options)
    if parts.n == 0:
        return 0.0
    return parts.loglik()


def profiled_loglik_W(Y_W, basis, locations, model, config, options=None):
    """(log-likelihood at sigma2_hat, sigma2_hat) for the correlation form of ``model``."""
    parts = likelihood_parts(Y_W, basis, locations, model.correlation_form(), config, options)
    if parts.n == 0:
        return 0.0, model.sigma2
    sigma2_hat = parts.sigma2_hat
    if sigma2_hat <= 0:
        raise NumericalBreakdown("Profiled sigma2 is not positive; Y_W is numerically zero")
    return parts.profiled(), sigma2_hat


# =============================================================================
# Estimation
# =============================================================================

@dataclass
class LikelihoodTrace:
    rows: list = field(default_factory=list)

    TRACE_COLUMNS = ["eval", "nu", "rho", "sigma2", "loglik", "wall_time", "feasible"]

    def append(self, **row):
        self.rows.append(row)

    @property
    def feasible_rows(self):
        return [row for row in self.rows if row["feasible"]]

    def best(self):
        feasible = self.feasible_rows
        if not feasible:
            return None
        return max(feasible, key=lambda row: (row["loglik"], -row["eval"]))

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=self.TRACE_COLUMNS)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    def __len__(self):
        return len(self.rows)


def fit_theta(locations, responses, trend, basis, config=None, options=None):
    """
    Maximize the decoupled likelihood over log(nu), log(rho) within bounds.

    Bounded Nelder-Mead; sigma2 is profiled at every evaluation unless
    ``config.profile_sigma2`` is off, in which case ``config.sigma2`` is used.
    Infeasible points (failed factorizations) are recorded in the trace and
    scored with a large penalty. Returns (CovarianceModel, LikelihoodTrace)
    with the best feasible evaluation.
    """
    config = config or LikelihoodConfig.from_settings()
    options = resolve_options(options)
    locations = as_locations(locations, trend.d_loc)
    Y_W = apply_W(basis, np.asarray(responses, dtype=float))

    rho_bounds = config.resolved_rho_bounds(locations)
    log_bounds = [
        (math.log(config.nu_bounds[0]), math.log(config.nu_bounds[1])),
        (math.log(rho_bounds[0]), math.log(rho_bounds[1])),
    ]
    nu0 = config.nu0 or math.sqrt(config.nu_bounds[0] * config.nu_bounds[1])
    rho0 = config.rho0 or math.sqrt(rho_bounds[0] * rho_bounds[1])
    x0 = np.clip([math.log(nu0), math.log(rho0)], [b[0] for b in log_bounds], [b[1] for b in log_bounds])

    trace = LikelihoodTrace()
    started = time.perf_counter()

    def objective(z):
        nu, rho = (float(v) for v in np.exp(z))
        feasible = True
        try:
            model = CovarianceModel(nu=nu, rho=rho, sigma2=config.sigma2)
            if config.profile_sigma2:
                value, sigma2 = profiled_loglik_W(Y_W, basis, locations, model, config, options)
            else:
                value, sigma2 = loglik_W(Y_W, basis, locations, model, config, options), config.sigma2
            if not math.isfinite(value):
                raise NumericalBreakdown("non-finite log-likelihood")
        except (NotPositiveDefinite, NumericalBreakdown, ValidationError) as exc:
            logger.debug("Infeasible theta (nu=%.4g, rho=%.4g): %s", nu, rho, exc)
            feasible, value, sigma2 = False, -math.inf, math.nan
        trace.append(
            eval=len(trace) + 1,
            nu=nu,
            rho=rho,
            sigma2=sigma2,
            loglik=value,
            wall_time=time.perf_counter() - started,
            feasible=feasible,
        )
        return -value if feasible else INFEASIBLE_PENALTY

    minimize(
        objective,
        x0,
        method="Nelder-Mead",
        bounds=log_bounds,
        options={"maxfev": config.max_evals, "xatol": 1e-5, "fatol": 1e-8},
    )

    best = trace.best()
    if best is None:
        raise EstimationFailed(f"All {len(trace)} likelihood evaluations were infeasible", trace.rows)

    theta_hat = CovarianceModel(nu=best["nu"], rho=best["rho"], sigma2=best["sigma2"])
    logger.info(
        "Estimated theta: nu=%.4g, rho=%.4g, sigma2=%.4g (loglik %.6g, %d evaluations, %d infeasible)",
        theta_hat.nu,
        theta_hat.rho,
        theta_hat.sigma2,
        best["loglik"],
        len(trace),
        len(trace) - len(trace.feasible_rows),
    )
    return theta_hat, trace

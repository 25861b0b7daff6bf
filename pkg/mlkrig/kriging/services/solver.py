"""
BLUP solves in the multilevel space.

C_W = W C W^T is applied in three steps (W^T, C, W) and never formed for the
iterative path. After C_W gamma_W = W Y is solved, gamma = W^T gamma_W and
beta follows from a least-squares fit of Y - C gamma on X.
"""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh_tridiagonal, eigvalsh, qr, solve, solve_triangular
from scipy.sparse.linalg import LinearOperator

from kriging.exceptions import NonConvergence, NotPositiveDefinite, NumericalBreakdown
from kriging.services.design import build_design_matrix
from kriging.services.execution import make_rng, resolve_options
from kriging.services.kernels import CovarianceOperator, as_locations
from kriging.services.mlbasis import apply_W, apply_Wt

logger = logging.getLogger(__name__)


# =============================================================================
# Reports and fitted models
# =============================================================================

@dataclass
class SolveReport:
    iterations: int
    final_relative_residual: float
    preconditioned: bool
    matvec_count: int
    wall_time: float
    method: str = "pcg"
    converged: bool = True
    max_iter: int = 0
    tol: float = 0.0
    residual_history: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Estimated parameters plus the solution of the bordered BLUP system."""

    theta_hat: object
    beta_hat: np.ndarray = field(repr=False)
    gamma_hat: np.ndarray = field(repr=False)
    gamma_W: np.ndarray = field(repr=False)
    trend: object = field(repr=False)
    locations: np.ndarray = field(repr=False)
    responses: np.ndarray = field(repr=False)
    basis: object = field(default=None, repr=False)
    theta_source: str = "fixed-theta"
    sigma2_profiled: bool = False
    transform: dict = field(default=None, repr=False)

    @property
    def n(self):
        return len(self.locations)

    @property
    def p(self):
        return self.trend.p


# =============================================================================
# Operators
# =============================================================================

class MultilevelOperator:
    """u -> W C W^T u for a fixed basis and covariance operator."""

    def __init__(self, basis, cov):
        self.basis = basis
        self.cov = cov
        self.matvec_count = 0

    @property
    def shape(self):
        return (self.basis.n_w, self.basis.n_w)

    def matvec(self, u):
        self.matvec_count += 1
        return self.basis.W @ self.cov.matvec(self.basis.W.T @ u)

    def dense(self):
        """C_W formed explicitly; small problems only."""
        if self.basis.n_w == 0:
            return np.zeros((0, 0))
        if self.cov.is_dense:
            WC = np.asarray(self.basis.W @ self.cov.dense())
            CW = np.asarray(self.basis.W @ WC.T).T
        else:
            CW = np.asarray(self.basis.W @ self.cov.matvec(self.basis.W.T.toarray()))
        return 0.5 * (CW + CW.T)

    def as_linear_operator(self):
        return LinearOperator(self.shape, matvec=self.matvec, dtype=float)


def multilevel_matvec(basis, locations, model, u, options=None):
    """W (C (W^T u)); C is applied row-blocked and C_W is never formed."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] != basis.n_w:
        raise ValidationError(
            "Vector length %(got)d does not match %(n)d multilevel rows.",
            code="shape",
            params={"got": u.shape[0], "n": basis.n_w},
        )
    cov = CovarianceOperator(locations, model, options)
    return apply_W(basis, cov.matvec(apply_Wt(basis, u)))


@dataclass(frozen=True)
class DiagonalPreconditioner:
    diagonal: np.ndarray = field(repr=False)

    def apply_inverse(self, r):
        return r / self.diagonal


def _diagonal_of_cw(basis, cov, options):
    def block_diagonal(block):
        local = cov.submatrix(block.support, block.support)
        return np.sum((block.coef @ local) * block.coef, axis=1)

    parts = options.map(block_diagonal, basis.row_blocks)
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def build_preconditioner(basis, locations, model, options=None, cov=None):
    """
    diag(C_W): entry i is w_i^T C w_i over the support of W row i.

    Rows of one tree node share a support, so each node contributes one dense
    product with its local covariance block.
    """
    options = resolve_options(options)
    cov = cov if cov is not None else CovarianceOperator(locations, model, options)
    diagonal = _diagonal_of_cw(basis, cov, options)
    bad = np.flatnonzero(~(diagonal > 0))
    if bad.size:
        raise NumericalBreakdown(
            f"diag(C_W) has {bad.size} nonpositive entries (first at row {bad[0]}); "
            f"C is not positive definite for nu={model.nu}, rho={model.rho}"
        )
    return DiagonalPreconditioner(diagonal=diagonal)


# =============================================================================
# Conjugate gradients
# =============================================================================

@dataclass
class PcgResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual_history: list


def pcg(matvec, b, tol, max_iter, preconditioner=None, callback=None):
    """
    Preconditioned CG on A x = b from x = 0.

    Convergence is judged on the unpreconditioned relative residual
    ||b - A x|| / ||b||. Nonpositive curvature p^T A p raises NotPositiveDefinite.
    ``callback(k, x, relative_residual)`` runs after each iteration.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    b_norm = np.linalg.norm(b)
    if b.size == 0 or b_norm == 0:
        return PcgResult(x=x, iterations=0, converged=True, residual_history=[0.0])

    apply_inverse = preconditioner.apply_inverse if preconditioner is not None else (lambda r: r)
    r = b.copy()
    z = apply_inverse(r)
    direction = z.copy()
    rz = r @ z
    history = [1.0]

    for k in range(1, max_iter + 1):
        Ad = matvec(direction)
        curvature = direction @ Ad
        if not np.isfinite(curvature) or curvature <= 0:
            raise NotPositiveDefinite(
                f"CG breakdown at iteration {k}: curvature {curvature:.3e} is not positive"
            )
        alpha = rz / curvature
        x += alpha * direction
        r -= alpha * Ad
        rel = float(np.linalg.norm(r) / b_norm)
        history.append(rel)
        if callback is not None:
            callback(k, x, rel)
        logger.debug("CG iteration %d: relative residual %.3e", k, rel)
        if rel <= tol:
            return PcgResult(x=x, iterations=k, converged=True, residual_history=history)

        z = apply_inverse(r)
        rz_next = r @ z
        direction = z + (rz_next / rz) * direction
        rz = rz_next

    return PcgResult(x=x, iterations=max_iter, converged=False, residual_history=history)


def default_max_iter(n):
    return int(math.ceil(10 * math.sqrt(max(n, 1))))


# =============================================================================
# Condition numbers
# =============================================================================

def _dense_of(operator, dim):
    if isinstance(operator, np.ndarray):
        return operator
    if hasattr(operator, "dense"):
        return operator.dense()
    return np.column_stack([operator.matvec(col) for col in np.eye(dim)])


def _lanczos_extremes(matvec, dim, steps, seed):
    rng = make_rng(seed, 0)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    basis = [q]
    alphas, betas = [], []
    for _ in range(min(steps, dim)):
        w = matvec(basis[-1])
        alpha = basis[-1] @ w
        alphas.append(alpha)
        # full reorthogonalization
        V = np.array(basis)
        w = w - V.T @ (V @ w)
        w = w - V.T @ (V @ w)
        beta = np.linalg.norm(w)
        if not np.isfinite(beta):
            return None
        if beta <= 1e-12 * abs(alpha) or len(basis) == dim:
            break
        betas.append(beta)
        basis.append(w / beta)
    if len(alphas) == 1:
        eig = np.array(alphas)
    else:
        eig = eigh_tridiagonal(np.array(alphas), np.array(betas[: len(alphas) - 1]), eigvals_only=True)
    return eig.min(), eig.max()


def estimate_condition_number(operator, dim, steps=None, dense_max=None, seed=0):
    """
    lambda_max / lambda_min of a symmetric positive definite operator.

    ``operator`` is a dense array or an object with ``matvec`` (and optionally
    ``dense()``). Up to ``dense_max`` rows the spectrum is computed exactly;
    above it a seeded Lanczos run gives the estimate. Returns None when no
    estimate is available (empty operator, nonpositive or nonfinite extremes).
    """
    cfg = settings.MLKRIG
    steps = cfg["LANCZOS_STEPS"] if steps is None else steps
    dense_max = cfg["DENSE_EIG_MAX"] if dense_max is None else dense_max
    if dim == 0:
        return None

    try:
        if dim <= dense_max:
            eig = eigvalsh(_dense_of(operator, dim))
            lo, hi = eig[0], eig[-1]
        else:
            matvec = operator.matvec if hasattr(operator, "matvec") else (lambda v: operator @ v)
            extremes = _lanczos_extremes(matvec, dim, steps, seed)
            if extremes is None:
                return None
            lo, hi = extremes
    except (LinAlgError, ValueError) as exc:
        logger.warning("Condition estimate unavailable: %s", exc)
        return None

    if not (np.isfinite(lo) and np.isfinite(hi)) or lo <= 0:
        logger.warning("Condition estimate unavailable: extreme eigenvalues %.3e, %.3e", lo, hi)
        return None
    return float(hi / lo)


# =============================================================================
# BLUP solve
# =============================================================================

def _use_preconditioner(mode, op, options):
    cfg = settings.MLKRIG
    if mode == "always":
        return True
    if mode == "never":
        return False
    kappa = estimate_condition_number(op, op.shape[0], steps=cfg["PRECONDITIONER_PROBE_STEPS"], dense_max=0)
    if kappa is not None and kappa < cfg["PRECONDITIONER_KAPPA_SKIP"]:
        logger.info("kappa(C_W) estimate %.1f below %.0f; solving without a preconditioner", kappa,
                    cfg["PRECONDITIONER_KAPPA_SKIP"])
        return False
    return True


def beta_from_residual(X, target):
    """Least-squares coefficients of ``target`` on X through a thin QR."""
    Q, R = qr(X, mode="economic")
    return solve_triangular(R, Q.T @ target)


def solve_blup(
    locations,
    responses,
    trend,
    basis,
    model,
    tol=1e-3,
    max_iter=None,
    method="pcg",
    preconditioner=None,
    options=None,
    callback=None,
):
    """
    Solve the bordered BLUP system through C_W gamma_W = W Y.

    ``method`` is "pcg", "direct" (Cholesky of the formed C_W) or "auto"
    (direct when N - p fits the dense fallback size). ``preconditioner`` is
    "auto", "always" or "never" and defaults to settings.
    Returns (FittedModel, SolveReport).
    """
    started = time.perf_counter()
    options = resolve_options(options)
    locations = as_locations(locations, trend.d_loc)
    Y = np.asarray(responses, dtype=float)
    if Y.shape != (len(locations),):
        raise ValidationError(
            "Expected %(n)d responses, got shape %(shape)s.",
            code="shape",
            params={"n": len(locations), "shape": Y.shape},
        )
    if not (0 < tol < 1):
        raise ValidationError("tol must lie in (0, 1), got %(tol)s.", code="parameter_domain", params={"tol": tol})
    if method not in ("pcg", "direct", "auto"):
        raise ValidationError("Unknown solve method %(method)r.", code="parameter_domain", params={"method": method})

    n_w = basis.n_w
    max_iter = default_max_iter(len(Y)) if max_iter is None else int(max_iter)
    if method == "auto":
        method = "direct" if n_w <= settings.MLKRIG["DENSE_FALLBACK_N"] else "pcg"

    X = build_design_matrix(trend, locations)
    cov = CovarianceOperator(locations, model, options)
    op = MultilevelOperator(basis, cov)
    YW = apply_W(basis, Y)

    preconditioned = False
    history = [0.0]
    iterations = 0
    # Y in span(X) up to roundoff
    if n_w == 0 or np.linalg.norm(YW) <= 1e-14 * max(np.linalg.norm(Y), 1e-300):
        gamma_W = np.zeros(n_w)
        residual = 0.0
    elif method == "direct":
        try:
            factor = cho_factor(op.dense(), lower=True)
        except LinAlgError as exc:
            raise NotPositiveDefinite(f"Cholesky of C_W failed: {exc}") from exc
        gamma_W = cho_solve(factor, YW)
        residual = float(np.linalg.norm(YW - op.matvec(gamma_W)) / np.linalg.norm(YW))
        history = [1.0, residual]
    else:
        mode = preconditioner or settings.MLKRIG["PRECONDITIONER"]
        precond = None
        if _use_preconditioner(mode, op, options):
            precond = build_preconditioner(basis, locations, model, options=options, cov=cov)
            preconditioned = True
        result = pcg(op.matvec, YW, tol, max_iter, preconditioner=precond, callback=callback)
        gamma_W, iterations, history = result.x, result.iterations, result.residual_history
        residual = history[-1]
        if not result.converged:
            report = SolveReport(
                iterations=iterations,
                final_relative_residual=residual,
                preconditioned=preconditioned,
                matvec_count=op.matvec_count,
                wall_time=time.perf_counter() - started,
                method=method,
                converged=False,
                max_iter=max_iter,
                tol=tol,
                residual_history=history,
            )
            raise NonConvergence(
                f"PCG reached max_iter={max_iter} with relative residual {residual:.3e} > tol={tol:.1e}",
                report,
            )

    gamma_hat = apply_Wt(basis, gamma_W)
    beta_hat = beta_from_residual(X, Y - cov.matvec(gamma_hat))

    report = SolveReport(
        iterations=iterations,
        final_relative_residual=residual,
        preconditioned=preconditioned,
        matvec_count=op.matvec_count,
        wall_time=time.perf_counter() - started,
        method=method,
        converged=True,
        max_iter=max_iter,
        tol=tol,
        residual_history=list(history),
    )
    fitted = FittedModel(
        theta_hat=model,
        beta_hat=beta_hat,
        gamma_hat=gamma_hat,
        gamma_W=gamma_W,
        trend=trend,
        locations=locations,
        responses=Y,
        basis=basis,
    )
    logger.info(
        "BLUP solved (%s): N=%d, p=%d, iterations=%d, residual=%.2e, preconditioned=%s, %.2fs",
        method,
        len(Y),
        trend.p,
        iterations,
        residual,
        preconditioned,
        report.wall_time,
    )
    return fitted, report


def dense_kkt_solve(C, X, Y):
    """Reference (gamma, beta) from the bordered system [[C, X], [X^T, 0]]."""
    C = np.asarray(C, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    K = np.zeros((n + p, n + p))
    K[:n, :n] = C
    K[:n, n:] = X
    K[n:, :n] = X.T
    rhs = np.concatenate([np.asarray(Y, dtype=float), np.zeros(p)])
    sol = solve(K, rhs, assume_a="sym")
    return sol[:n], sol[n:]

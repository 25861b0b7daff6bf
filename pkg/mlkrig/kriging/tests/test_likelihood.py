"""
Tests for the decoupled log-likelihood, the sparsified C_W and theta estimation.
"""
import math

import numpy as np
import pytest
from django.core.exceptions import ValidationError
from scipy.linalg import cholesky
from scipy.stats import multivariate_normal

from kriging.exceptions import EstimationFailed, NotPositiveDefinite
from kriging.services import likelihood
from kriging.services.bench import SphereBenchSpec, generate_sphere_dataset
from kriging.services.design import TrendBasis, build_design_matrix, build_kdtree
from kriging.services.execution import ExecutionOptions, make_rng
from kriging.services.kernels import CovarianceModel, CovarianceOperator, assemble_covariance
from kriging.services.likelihood import (
    LikelihoodConfig,
    fit_theta,
    loglik_W,
    profiled_loglik_W,
    sparsify_CW,
)
from kriging.services.mlbasis import apply_W, build_multilevel_basis
from kriging.services.solver import MultilevelOperator
from conftest import CovarianceModelFactory, LikelihoodConfigFactory


def gp_instance(n, d_loc, model, degree=1, seed=3, leaf_min=None):
    """Uniform locations with a zero-trend Matérn draw, plus trend and basis."""
    rng = make_rng(seed, 60)
    locations = rng.uniform(size=(n, d_loc))
    factor = cholesky(assemble_covariance(locations, model), lower=True)
    responses = factor @ rng.standard_normal(n)
    trend = TrendBasis.total_degree(d_loc, degree, locations)
    X = build_design_matrix(trend, locations)
    basis = build_multilevel_basis(X, build_kdtree(locations, leaf_min or trend.p))
    return locations, responses, trend, X, basis


def dense_loglik(basis, locations, model, Y):
    W = basis.W.toarray()
    CW = W @ assemble_covariance(locations, model) @ W.T
    return multivariate_normal(mean=np.zeros(len(CW)), cov=CW).logpdf(W @ Y)


# =============================================================================
# Log-likelihood Tests
# =============================================================================

class TestLoglikW:
    def test_scalar_gaussian(self):
        """Test the one-dimensional case against the scalar Gaussian density."""
        locations = np.array([[0.0, 0.0], [0.3, 0.4]])
        model = CovarianceModelFactory(nu=0.5, rho=1.0)
        trend = TrendBasis.total_degree(2, 0)
        basis = build_multilevel_basis(build_design_matrix(trend, locations), build_kdtree(locations, 1))
        Y = np.array([1.0, -0.5])
        c = float(MultilevelOperator(basis, CovarianceOperator(locations, model)).dense()[0, 0])
        y = float(apply_W(basis, Y)[0])
        expected = -0.5 * math.log(2 * math.pi) - 0.5 * math.log(c) - y * y / (2 * c)
        value = loglik_W(apply_W(basis, Y), basis, locations, model, LikelihoodConfigFactory())
        assert value == pytest.approx(expected, abs=1e-12)
        assert c == pytest.approx(1.0 - math.exp(-0.5), rel=1e-12)

    def test_matches_dense_density(self, small_problem):
        """Test that the dense-C_W evaluation equals the Gaussian log-density of Y_W."""
        p = small_problem
        Y_W = apply_W(p["basis"], p["responses"])
        value = loglik_W(Y_W, p["basis"], p["locations"], p["model"], LikelihoodConfigFactory(sparse_threshold=0.0))
        expected = dense_loglik(p["basis"], p["locations"], p["model"], p["responses"])
        assert value == pytest.approx(expected, abs=1e-8)

    def test_trend_does_not_matter(self, small_problem):
        """Test that adding X b to the data leaves the likelihood unchanged."""
        p = small_problem
        config = LikelihoodConfigFactory()
        shifted = p["responses"] + p["X"] @ np.array([5.0, -3.0, 2.0])
        a = loglik_W(apply_W(p["basis"], p["responses"]), p["basis"], p["locations"], p["model"], config)
        b = loglik_W(apply_W(p["basis"], shifted), p["basis"], p["locations"], p["model"], config)
        assert a == pytest.approx(b, abs=1e-8)

    def test_profiled_sigma2_is_maximizer(self, small_problem):
        """Test that the profiled value dominates nearby fixed sigma2 values."""
        p = small_problem
        config = LikelihoodConfigFactory()
        Y_W = apply_W(p["basis"], p["responses"])
        best, sigma2_hat = profiled_loglik_W(Y_W, p["basis"], p["locations"], p["model"], config)
        for factor in (0.8, 1.25):
            model = CovarianceModelFactory(sigma2=sigma2_hat * factor)
            assert loglik_W(Y_W, p["basis"], p["locations"], model, config) < best

    def test_sparse_factorization_path(self, small_problem):
        """Test that the sparse LU path agrees with the dense Cholesky path."""
        p = small_problem
        Y_W = apply_W(p["basis"], p["responses"])
        dense = loglik_W(Y_W, p["basis"], p["locations"], p["model"], LikelihoodConfigFactory(sparse_threshold=0.0))
        sparse = loglik_W(
            Y_W,
            p["basis"],
            p["locations"],
            p["model"],
            LikelihoodConfigFactory(sparse_threshold=1e6, dense_fallback_n=10),
        )
        assert sparse == pytest.approx(dense, abs=1e-7)

    def test_length_checked(self, small_problem):
        """Test that Y_W must have N - p entries."""
        p = small_problem
        with pytest.raises(ValidationError) as exc:
            loglik_W(np.ones(4), p["basis"], p["locations"], p["model"], LikelihoodConfigFactory())
        assert exc.value.code == "shape"


class TestLikelihoodConfig:
    def test_zero_and_infinite_tau_mean_dense(self):
        """Test that tau of 0 and inf both select the dense C_W."""
        assert LikelihoodConfigFactory(sparse_threshold=0.0).uses_dense_cw
        assert LikelihoodConfigFactory(sparse_threshold=math.inf).uses_dense_cw
        assert not LikelihoodConfigFactory(sparse_threshold=3.0).uses_dense_cw

    @pytest.mark.parametrize("overrides", [{"sparse_threshold": -1.0}, {"nu_bounds": (2.0, 1.0)}, {"max_evals": 0}])
    def test_rejects_bad_values(self, overrides):
        """Test that invalid settings raise parameter_domain."""
        with pytest.raises(ValidationError) as exc:
            LikelihoodConfigFactory(**overrides)
        assert exc.value.code == "parameter_domain"

    def test_from_settings(self, settings):
        """Test that defaults come from settings and None overrides are ignored."""
        settings.MLKRIG = {**settings.MLKRIG, "SPARSE_TAU": 2.5, "MAX_EVALS": 17}
        config = LikelihoodConfig.from_settings(max_evals=None, profile_sigma2=False)
        assert config.sparse_threshold == 2.5
        assert config.max_evals == 17
        assert not config.profile_sigma2


# =============================================================================
# Sparsification Tests
# =============================================================================

class TestSparsifyCW:
    def test_infinite_tau_is_dense(self, small_problem):
        """Test that tau = inf keeps every entry."""
        p = small_problem
        W = p["basis"].W.toarray()
        dense = W @ assemble_covariance(p["locations"], p["model"]) @ W.T
        sparse = sparsify_CW(p["basis"], p["locations"], p["model"], math.inf)
        np.testing.assert_allclose(sparse.toarray(), dense, atol=1e-12)

    def test_zero_tau_separates_leaves(self, small_problem):
        """Test that tau = 0 drops every coupling between two different leaves."""
        p = small_problem
        basis = p["basis"]
        sparse = sparsify_CW(basis, p["locations"], p["model"], 0.0).toarray()
        leaf_blocks = [b for b in basis.row_blocks if b.level == 0]
        assert len(leaf_blocks) > 1
        for a in leaf_blocks:
            for b in leaf_blocks:
                coupling = sparse[a.start:a.stop, b.start:b.stop]
                if a is b:
                    assert np.all(np.diag(coupling) > 0)
                else:
                    assert not np.any(coupling)

    def test_sphere_instance_is_accurate(self):
        """Test that tau = 3 stays within 5% in Frobenius norm on the sphere benchmark."""
        spec = SphereBenchSpec(d=3, sizes=(300,), nu=1.25, rho=10.0, degree=2)
        obs = generate_sphere_dataset(spec)[0]
        model = CovarianceModel(nu=spec.nu, rho=spec.rho)
        trend = TrendBasis.total_degree(spec.d_loc, spec.degree, obs.locations)
        basis = build_multilevel_basis(
            build_design_matrix(trend, obs.locations), build_kdtree(obs.locations, trend.p)
        )
        W = basis.W.toarray()
        dense = W @ assemble_covariance(obs.locations, model) @ W.T
        sparse = sparsify_CW(basis, obs.locations, model, 3.0).toarray()
        assert np.linalg.norm(sparse - dense) <= 0.05 * np.linalg.norm(dense)

    def test_matches_masked_dense(self, small_problem):
        """Test that kept entries equal C_W and dropped ones are exactly the far block pairs."""
        p = small_problem
        basis = p["basis"]
        tau = 0.2 / p["model"].rho
        W = basis.W.toarray()
        dense = W @ assemble_covariance(p["locations"], p["model"]) @ W.T
        expected = np.zeros_like(dense)
        for a in basis.row_blocks:
            for b in basis.row_blocks:
                la, ha = p["locations"][a.support].min(axis=0), p["locations"][a.support].max(axis=0)
                lb, hb = p["locations"][b.support].min(axis=0), p["locations"][b.support].max(axis=0)
                gap = np.maximum(0.0, np.maximum(la - hb, lb - ha))
                if np.linalg.norm(gap) <= tau * p["model"].rho:
                    expected[a.start:a.stop, b.start:b.stop] = dense[a.start:a.stop, b.start:b.stop]
        sparse = sparsify_CW(basis, p["locations"], p["model"], tau).toarray()
        np.testing.assert_allclose(sparse, expected, atol=1e-12)
        np.testing.assert_array_equal(sparse, sparse.T)

    def test_kernel_blocks_stay_within_row_budget(self, monkeypatch):
        """Test that without a dense cache no kernel block exceeds block_rows x N."""
        model = CovarianceModel(nu=1.5, rho=0.3)
        locations, _, _, _, basis = gp_instance(400, 2, model, degree=1, seed=8)
        options = ExecutionOptions(threads=1, block_rows=32, memory_budget_mb=0)
        shapes = []
        original = CovarianceOperator.submatrix

        def recording(self, rows, cols):
            block = original(self, rows, cols)
            shapes.append(block.shape)
            return block

        monkeypatch.setattr(CovarianceOperator, "submatrix", recording)
        sparse = sparsify_CW(basis, locations, model, 1.0, options=options)
        assert shapes
        assert max(rows for rows, _ in shapes) <= 32
        assert max(r * c for r, c in shapes) <= 32 * 400

        W = basis.W.toarray()
        dense = W @ assemble_covariance(locations, model) @ W.T
        kept = sparse.toarray() != 0
        np.testing.assert_allclose(sparse.toarray()[kept], dense[kept], rtol=1e-10, atol=1e-12)

    def test_negative_tau_rejected(self, small_problem):
        """Test that a negative tau raises parameter_domain."""
        p = small_problem
        with pytest.raises(ValidationError):
            sparsify_CW(p["basis"], p["locations"], p["model"], -1.0)


# =============================================================================
# Estimation Tests
# =============================================================================

class TestFitTheta:
    def test_estimate_dominates_truth(self):
        """Test that the estimate's likelihood is at least that of the true theta."""
        truth = CovarianceModel(nu=1.5, rho=0.5, sigma2=2.0)
        locations, responses, trend, _, basis = gp_instance(300, 2, truth)
        config = LikelihoodConfigFactory(max_evals=40, nu0=truth.nu, rho0=truth.rho)
        theta, trace = fit_theta(locations, responses, trend, basis, config)
        Y_W = apply_W(basis, responses)
        at_truth = loglik_W(Y_W, basis, locations, truth, config)
        assert trace.best()["loglik"] >= at_truth - 1e-6
        assert len(trace) <= 40 + 3
        assert theta.sigma2 == pytest.approx(trace.best()["sigma2"])

    def test_reproducible(self):
        """Test that two runs with the same inputs give identical estimates."""
        truth = CovarianceModel(nu=1.5, rho=0.5)
        locations, responses, trend, _, basis = gp_instance(150, 2, truth)
        config = LikelihoodConfigFactory(max_evals=25)
        first, _ = fit_theta(locations, responses, trend, basis, config)
        second, _ = fit_theta(locations, responses, trend, basis, config)
        assert (first.nu, first.rho, first.sigma2) == (second.nu, second.rho, second.sigma2)

    def test_trace_columns(self, tmp_path):
        """Test that the trace is written with one row per evaluation."""
        truth = CovarianceModel(nu=1.5, rho=0.5)
        locations, responses, trend, _, basis = gp_instance(120, 2, truth)
        _, trace = fit_theta(locations, responses, trend, basis, LikelihoodConfigFactory(max_evals=10))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        frame = trace.to_frame()
        assert list(frame.columns) == ["eval", "nu", "rho", "sigma2", "loglik", "wall_time", "feasible"]
        assert frame["eval"].tolist() == list(range(1, len(trace) + 1))
        assert path.read_text().startswith("eval,nu,rho")

    def test_fixed_sigma2(self):
        """Test that switching profiling off keeps the configured sigma2."""
        truth = CovarianceModel(nu=1.5, rho=0.5)
        locations, responses, trend, _, basis = gp_instance(120, 2, truth)
        config = LikelihoodConfigFactory(max_evals=10, profile_sigma2=False, sigma2=3.0)
        theta, _ = fit_theta(locations, responses, trend, basis, config)
        assert theta.sigma2 == 3.0

    def test_all_infeasible_raises(self, monkeypatch):
        """Test that a search with no feasible evaluation raises EstimationFailed."""
        def always_fails(*args, **kwargs):
            raise NotPositiveDefinite("forced")

        monkeypatch.setattr(likelihood, "profiled_loglik_W", always_fails)
        truth = CovarianceModel(nu=1.5, rho=0.5)
        locations, responses, trend, _, basis = gp_instance(60, 2, truth)
        with pytest.raises(EstimationFailed) as exc:
            fit_theta(locations, responses, trend, basis, LikelihoodConfigFactory(max_evals=5))
        assert exc.value.trace
        assert not any(row["feasible"] for row in exc.value.trace)

    @pytest.mark.slow
    def test_desk_scale_gp_draw(self):
        """Test that the estimate dominates the truth on a 2000-point draw."""
        truth = CovarianceModel(nu=1.5, rho=0.5, sigma2=2.0)
        locations, responses, trend, _, basis = gp_instance(2000, 2, truth)
        config = LikelihoodConfigFactory(max_evals=60, nu0=truth.nu, rho0=truth.rho)
        theta, trace = fit_theta(locations, responses, trend, basis, config)
        at_truth = loglik_W(apply_W(basis, responses), basis, locations, truth, config)
        assert trace.best()["loglik"] >= at_truth - 1e-6
        assert theta.sigma2 > 0
        assert config.nu_bounds[0] <= theta.nu <= config.nu_bounds[1]

"""
Shared pytest fixtures and factories for mlkrig tests.
"""
import logging

import numpy as np
import pytest

import factory

from imputation.services.datasets import CsvSchema
from imputation.services.synthetic import generate_gp_table
from kriging.services.bench import SphereBenchSpec
from kriging.services.design import TrendBasis, build_design_matrix, build_kdtree
from kriging.services.execution import ExecutionOptions, make_rng
from kriging.services.kernels import CovarianceModel
from kriging.services.likelihood import LikelihoodConfig
from kriging.services.mlbasis import build_multilevel_basis
from kriging.services.solver import solve_blup


# =============================================================================
# Parameter Factories
# =============================================================================

class CovarianceModelFactory(factory.Factory):
    class Meta:
        model = CovarianceModel

    nu = 1.5
    rho = 0.5
    sigma2 = 1.0


class LikelihoodConfigFactory(factory.Factory):
    class Meta:
        model = LikelihoodConfig

    sparse_threshold = 0.0
    nu_bounds = (0.25, 4.0)
    max_evals = 40
    profile_sigma2 = True


class SphereBenchSpecFactory(factory.Factory):
    class Meta:
        model = SphereBenchSpec

    d = 3
    sizes = (60, 120)
    nu = 1.25
    rho = 10.0
    degree = 1
    tol = 1e-3
    seed = 0
    convention = "table"
    label = factory.Sequence(lambda n: f"test-{n}")


class CsvSchemaFactory(factory.Factory):
    class Meta:
        model = CsvSchema

    response = "y"
    predictors = ("x1", "x2")


# =============================================================================
# Scattered Data Fixtures
# =============================================================================

@pytest.fixture
def rng():
    return make_rng(1234, 99)


@pytest.fixture
def execution():
    """Single-threaded options so results do not depend on the host."""
    return ExecutionOptions(threads=1, block_rows=64, memory_budget_mb=64)


def scattered(n, d_loc, seed=7):
    """n distinct uniform points on [0, 1]^d_loc with a smooth response."""
    points = make_rng(seed, 50).uniform(size=(n, d_loc))
    values = np.sin(3 * points[:, 0]) + points.sum(axis=1) ** 2
    return points, values


@pytest.fixture
def points_2d():
    return scattered(120, 2)


@pytest.fixture
def points_3d():
    return scattered(200, 3)


@pytest.fixture
def small_problem(points_2d, execution):
    """A linear-trend 2-D instance with its design matrix, tree and basis."""
    locations, responses = points_2d
    trend = TrendBasis.total_degree(2, 1, locations)
    X = build_design_matrix(trend, locations)
    tree = build_kdtree(locations, leaf_min=trend.p)
    basis = build_multilevel_basis(X, tree, options=execution)
    return {
        "locations": locations,
        "responses": responses,
        "trend": trend,
        "X": X,
        "tree": tree,
        "basis": basis,
        "model": CovarianceModelFactory(),
    }


@pytest.fixture
def fitted_model(small_problem, execution):
    fitted, _ = solve_blup(
        small_problem["locations"],
        small_problem["responses"],
        small_problem["trend"],
        small_problem["basis"],
        small_problem["model"],
        method="direct",
        options=execution,
    )
    return fitted


@pytest.fixture
def app_logs(caplog, monkeypatch):
    """caplog that also sees the app loggers (they do not propagate to root)."""
    for name in ("kriging", "imputation"):
        monkeypatch.setattr(logging.getLogger(name), "propagate", True)
    caplog.set_level(logging.INFO)
    return caplog


# =============================================================================
# CSV Fixtures
# =============================================================================

@pytest.fixture
def gp_table():
    """150 rows drawn from the kriging model over x1, x2 with about 10% of y missing."""
    return generate_gp_table(150, seed=2, n_predictors=2, missing_rate=0.1)


@pytest.fixture
def gp_csv(gp_table, tmp_path):
    path = tmp_path / "table.csv"
    gp_table.frame.to_csv(path, index=False)
    return path

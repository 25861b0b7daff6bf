"""
Tests for the sphere benchmark: data generation, efficiency accounting and the sweep.
"""
import json
import math

import numpy as np
import pandas as pd
import pytest
from django.conf import settings
from django.core.exceptions import ValidationError

from kriging.services.bench import (
    PRESETS,
    SWEEP_COLUMNS,
    cost_exponent,
    efficiency_ratio,
    extrapolate_single_level_cost,
    generate_sphere_dataset,
    run_conditioning_sweep,
)
from conftest import SphereBenchSpecFactory


# =============================================================================
# Data Generation Tests
# =============================================================================

class TestSphereDataset:
    def test_points_on_unit_sphere(self):
        """Test that locations and response together have unit norm."""
        spec = SphereBenchSpecFactory(sizes=(50, 100))
        for obs in generate_sphere_dataset(spec):
            full = np.column_stack([obs.locations, obs.responses])
            np.testing.assert_allclose(np.linalg.norm(full, axis=1), 1.0, rtol=1e-12)
            assert np.all(np.abs(obs.responses) <= 1.0)

    def test_sets_are_nested(self):
        """Test that each set is a prefix of the next."""
        small, large = generate_sphere_dataset(SphereBenchSpecFactory(sizes=(40, 90)))
        np.testing.assert_array_equal(large.locations[:40], small.locations)
        np.testing.assert_array_equal(large.responses[:40], small.responses)

    def test_seeded(self):
        """Test that the same seed gives the same points and another seed does not."""
        a = generate_sphere_dataset(SphereBenchSpecFactory(seed=5))[0]
        b = generate_sphere_dataset(SphereBenchSpecFactory(seed=5))[0]
        c = generate_sphere_dataset(SphereBenchSpecFactory(seed=6))[0]
        np.testing.assert_array_equal(a.locations, b.locations)
        assert not np.array_equal(a.locations, c.locations)

    @pytest.mark.parametrize("convention,d_loc", [("table", 20), ("literal", 19)])
    def test_dimension_conventions(self, convention, d_loc):
        """Test that "table" gives d covariates and "literal" d - 1."""
        spec = SphereBenchSpecFactory(d=20, sizes=(10,), convention=convention)
        assert spec.d_loc == d_loc
        assert generate_sphere_dataset(spec)[0].locations.shape == (10, d_loc)


class TestSphereBenchSpec:
    @pytest.mark.parametrize("sizes", [(100, 100), (200, 100), ()])
    def test_rejects_unordered_sizes(self, sizes):
        """Test that sizes must be strictly increasing."""
        with pytest.raises(ValidationError) as exc:
            SphereBenchSpecFactory(sizes=sizes)
        assert exc.value.code == "sizes"

    def test_rejects_small_dimension(self):
        """Test that d below 3 is rejected."""
        with pytest.raises(ValidationError):
            SphereBenchSpecFactory(d=2)

    def test_presets(self):
        """Test the preset trend sizes."""
        assert PRESETS["desk"].sizes == (1000, 2000, 4000)
        assert math.comb(PRESETS["table-a"].d_loc + 3, 3) == 1771
        assert math.comb(PRESETS["table-b"].d_loc + 2, 2) == 351


# =============================================================================
# Efficiency Accounting Tests
# =============================================================================

class TestEfficiency:
    def test_equal_costs(self):
        """Test that equal costs give a ratio of one."""
        assert efficiency_ratio(3.5, 3.5) == 1.0

    def test_extrapolation_is_linear_in_p(self):
        """Test that p single-level solves cost p times one solve."""
        assert extrapolate_single_level_cost(351, 0.5) == pytest.approx(175.5)

    def test_rejects_nonpositive_multilevel_cost(self):
        """Test that a zero multilevel cost is rejected."""
        with pytest.raises(ValidationError):
            efficiency_ratio(1.0, 0.0)

    def test_cost_exponent(self):
        """Test the log-log slope of t = N^1.5."""
        sizes = [1000, 2000, 4000]
        assert cost_exponent(sizes, [n**1.5 for n in sizes]) == pytest.approx(1.5)

    def test_cost_exponent_needs_two_rows(self):
        """Test that one usable row gives no exponent."""
        assert cost_exponent([1000, 2000], [0.2, 0.0]) is None


# =============================================================================
# Sweep Tests
# =============================================================================

class TestConditioningSweep:
    def test_small_sweep(self, execution, tmp_path):
        """Test the report columns, the manifest and the conditioning improvement."""
        spec = SphereBenchSpecFactory(d=3, sizes=(80, 160), degree=1, rho=0.5)
        result = run_conditioning_sweep(spec, execution)
        frame = result.to_frame()
        assert list(frame.columns) == SWEEP_COLUMNS
        assert list(frame["N"]) == [80, 160]
        assert (frame["kappa_CW"] < frame["kappa_C"]).all()
        assert result.manifest["p"] == 4
        assert result.manifest["seed"] == spec.seed
        assert result.manifest["host"]["threads"] == 1
        assert result.manifest["version"]["mlkrig"] == settings.VERSION

        csv_path, manifest_path = result.write(tmp_path / "sweep.csv")
        assert pd.read_csv(csv_path)["N"].tolist() == [80, 160]
        with open(manifest_path, encoding="utf-8") as fh:
            assert json.load(fh)["spec"]["label"] == spec.label

    @pytest.mark.slow
    def test_desk_preset(self, execution):
        """Test that the desk sweep completes every size with a multilevel estimate."""
        result = run_conditioning_sweep(PRESETS["desk"], execution)
        frame = result.to_frame()
        assert len(frame) == 3
        assert frame["kappa_CW"].notna().all()
        assert (frame["Total_s"] > 0).all()
        assert result.manifest["p"] == 231

    def test_seed_repeats(self, execution):
        """Test that the same seed gives identical non-timing columns."""
        spec = SphereBenchSpecFactory(d=3, sizes=(50,), degree=1, rho=0.5)
        a = run_conditioning_sweep(spec, execution).to_frame()
        b = run_conditioning_sweep(spec, execution).to_frame()
        columns = ["N", "kappa_C", "kappa_CW", "itr_C", "itr_CW"]
        pd.testing.assert_frame_equal(a[columns], b[columns])


@pytest.mark.slow
class TestDeskConditioning:
    def test_sphere_at_2000(self, execution):
        """Test kappa and CG iteration counts on the d=20, degree 2 sphere at N=2000."""
        spec = SphereBenchSpecFactory(d=20, sizes=(2000,), degree=2, nu=1.25, rho=10.0, tol=1e-3)
        row = run_conditioning_sweep(spec, execution).rows[0]
        assert row["kappa_CW"] <= row["kappa_C"]
        assert row["kappa_CW"] < 1e2
        assert row["kappa_C"] > 1e4
        assert row["itr_CW"] <= row["itr_C"] / 3

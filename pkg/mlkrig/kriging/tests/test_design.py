"""
Tests for the polynomial trend basis, design matrices and the kd-tree.
"""
import math

import numpy as np
import pytest
from django.core.exceptions import ValidationError

from kriging.services.design import (
    TrendBasis,
    build_design_matrix,
    build_kdtree,
    default_leaf_min,
    eval_basis,
)
from conftest import scattered


class TestTrendBasis:
    def test_constant_trend(self):
        """Test that degree 0 evaluates to [1] anywhere."""
        basis = TrendBasis.total_degree(3, 0)
        np.testing.assert_array_equal(eval_basis(basis, np.array([0.2, -4.0, 9.0])), [1.0])

    def test_linear_ordering(self):
        """Test that d_loc=2, degree 1 evaluates to [1, a, b]."""
        basis = TrendBasis.total_degree(2, 1)
        np.testing.assert_array_equal(eval_basis(basis, np.array([3.0, 5.0])), [1.0, 3.0, 5.0])

    def test_quadratic_ordering(self):
        """Test the graded order 1, a, b, a^2, ab, b^2."""
        basis = TrendBasis.total_degree(2, 2)
        assert basis.exponent_table == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
        np.testing.assert_array_equal(eval_basis(basis, np.array([2.0, 3.0])), [1, 2, 3, 4, 6, 9])

    @pytest.mark.parametrize("d_loc,degree,p", [(20, 3, 1771), (25, 2, 351), (4, 1, 5), (1, 5, 6)])
    def test_size_is_binomial(self, d_loc, degree, p):
        """Test that p = C(d_loc + degree, degree)."""
        basis = TrendBasis.total_degree(d_loc, degree)
        assert basis.p == p == math.comb(d_loc + degree, degree)

    def test_exponents_distinct_and_bounded(self):
        """Test that exponent rows are distinct with total degree at most w."""
        basis = TrendBasis.total_degree(4, 3)
        table = basis.exponent_table
        assert len(set(table)) == len(table)
        assert [sum(row) for row in table] == sorted(sum(row) for row in table)
        assert max(sum(row) for row in table) == 3

    def test_rescaling_from_locations(self, points_2d):
        """Test that training locations are mapped onto [-1, 1]."""
        locations = points_2d[0]
        basis = TrendBasis.total_degree(2, 1, locations)
        X = basis.evaluate(locations)
        assert basis.rescaled
        np.testing.assert_allclose(X[:, 1:].min(axis=0), -1.0)
        np.testing.assert_allclose(X[:, 1:].max(axis=0), 1.0)

    def test_wrong_dimension_rejected(self):
        """Test that a point of the wrong dimension raises a shape error."""
        basis = TrendBasis.total_degree(3, 1)
        with pytest.raises(ValidationError) as exc:
            eval_basis(basis, np.array([1.0, 2.0]))
        assert exc.value.code == "shape"


class TestDesignMatrix:
    def test_constant_trend_is_ones(self, points_2d):
        """Test that degree 0 gives a column of ones."""
        X = build_design_matrix(TrendBasis.total_degree(2, 0), points_2d[0])
        np.testing.assert_array_equal(X, np.ones((len(points_2d[0]), 1)))

    def test_square_generic_is_invertible(self):
        """Test that N = p generic points give an invertible X."""
        locations, _ = scattered(6, 2)
        X = build_design_matrix(TrendBasis.total_degree(2, 2, locations), locations)
        assert X.shape == (6, 6)
        assert np.linalg.matrix_rank(X) == 6

    def test_collinear_points_are_degenerate(self):
        """Test that three collinear points cannot fit a planar trend."""
        locations = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        with pytest.raises(ValidationError) as exc:
            build_design_matrix(TrendBasis.total_degree(2, 1, locations), locations)
        assert exc.value.code == "degenerate_design"
        assert exc.value.params["deficient"] == 1

    def test_too_few_points(self):
        """Test that N < p raises insufficient_data."""
        locations = np.array([[0.0, 0.0], [1.0, 0.5]])
        with pytest.raises(ValidationError) as exc:
            build_design_matrix(TrendBasis.total_degree(2, 1), locations)
        assert exc.value.code == "insufficient_data"


class TestKdTree:
    def test_single_leaf(self):
        """Test that N = leaf_min gives one leaf and one level."""
        locations, _ = scattered(8, 2)
        tree = build_kdtree(locations, leaf_min=8)
        assert len(tree.leaves) == 1
        assert tree.levels == 1

    def test_four_balanced_leaves(self):
        """Test that N = 4 leaf_min gives three levels and four leaves of leaf_min points."""
        locations, _ = scattered(40, 2)
        tree = build_kdtree(locations, leaf_min=10)
        assert tree.levels == 3
        assert [leaf.size for leaf in tree.leaves] == [10, 10, 10, 10]

    @pytest.mark.parametrize("n,leaf_min", [(200, 3), (1000, 7), (333, 10)])
    def test_partition_and_leaf_sizes(self, n, leaf_min):
        """Test that leaves partition the indices with sizes in [leaf_min, 2 leaf_min)."""
        locations, _ = scattered(n, 3)
        tree = build_kdtree(locations, leaf_min)
        all_indices = np.concatenate([leaf.indices for leaf in tree.leaves])
        np.testing.assert_array_equal(np.sort(all_indices), np.arange(n))
        assert all(leaf_min <= leaf.size < 2 * leaf_min for leaf in tree.leaves)
        assert tree.levels <= math.ceil(math.log2(n / leaf_min)) + 1

    def test_internal_nodes_concatenate_children(self, points_2d):
        """Test that an internal node's indices are its children's in order."""
        tree = build_kdtree(points_2d[0], 5)
        for node in tree.nodes():
            if not node.is_leaf:
                left, right = node.children
                np.testing.assert_array_equal(node.indices, np.concatenate([left.indices, right.indices]))

    def test_deterministic(self, points_3d):
        """Test that two builds give identical leaves."""
        a = build_kdtree(points_3d[0], 4)
        b = build_kdtree(points_3d[0], 4)
        for x, y in zip(a.leaves, b.leaves):
            np.testing.assert_array_equal(x.indices, y.indices)

    def test_too_few_points(self):
        """Test that N < leaf_min raises insufficient_data."""
        locations, _ = scattered(3, 2)
        with pytest.raises(ValidationError) as exc:
            build_kdtree(locations, 5)
        assert exc.value.code == "insufficient_data"

    def test_default_leaf_min_respects_floor(self, settings):
        """Test that the default leaf size is max(p, floor)."""
        settings.MLKRIG = {**settings.MLKRIG, "LEAF_MIN_FLOOR": 32}
        assert default_leaf_min(10) == 32
        assert default_leaf_min(351) == 351

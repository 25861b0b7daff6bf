"""
Total-degree polynomial trend basis, design matrices and the kd-tree partition.
"""
import logging
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy.linalg import qr

from kriging.services.kernels import as_locations

logger = logging.getLogger(__name__)


# =============================================================================
# Trend basis
# =============================================================================

@dataclass(frozen=True, eq=False)
class TrendBasis:
    """
    Monomials of total degree <= ``degree`` in ``d_loc`` variables.

    Columns are graded by total degree; inside a degree they follow the
    sorted variable-index tuples of ``combinations_with_replacement`` (for two
    variables and degree 2: 1, a, b, a^2, ab, b^2). Column j > 0 is its parent
    column times one coordinate, which is how matrices are evaluated.

    Coordinates are mapped affinely onto [-1, 1] with ``center`` and
    ``half_range`` (fixed from training locations) before evaluation.
    """

    d_loc: int
    degree: int
    exponents: np.ndarray = field(repr=False)
    parents: tuple = field(repr=False)
    center: np.ndarray = field(repr=False)
    half_range: np.ndarray = field(repr=False)

    @property
    def p(self):
        return len(self.exponents)

    @property
    def exponent_table(self):
        return [tuple(int(e) for e in row) for row in self.exponents]

    @property
    def rescaled(self):
        return bool(np.any(self.center != 0) or np.any(self.half_range != 1))

    @classmethod
    def total_degree(cls, d_loc, degree, locations=None, rescale=True):
        if d_loc < 1 or degree < 0:
            raise ValidationError(
                "Trend basis needs d_loc >= 1 and degree >= 0 (got %(d)s, %(w)s).",
                code="parameter_domain",
                params={"d": d_loc, "w": degree},
            )

        index = {(): 0}
        exponents = [np.zeros(d_loc, dtype=np.int64)]
        parents = [(-1, -1)]
        for k in range(1, degree + 1):
            for combo in combinations_with_replacement(range(d_loc), k):
                index[combo] = len(exponents)
                parents.append((index[combo[:-1]], combo[-1]))
                exponents.append(np.bincount(combo, minlength=d_loc).astype(np.int64))

        center = np.zeros(d_loc)
        half_range = np.ones(d_loc)
        if rescale and locations is not None:
            locations = as_locations(locations, d_loc)
            lo, hi = locations.min(axis=0), locations.max(axis=0)
            center = (hi + lo) / 2.0
            half_range = np.where(hi > lo, (hi - lo) / 2.0, 1.0)

        basis = cls(
            d_loc=d_loc,
            degree=degree,
            exponents=np.array(exponents),
            parents=tuple(parents),
            center=center,
            half_range=half_range,
        )
        assert basis.p == comb(d_loc + degree, degree)
        return basis

    def evaluate(self, points):
        """Rows k(x)^T for a batch of points, shape (n, p)."""
        points = as_locations(points, self.d_loc)
        z = (points - self.center) / self.half_range
        out = np.empty((len(z), self.p))
        out[:, 0] = 1.0
        for j in range(1, self.p):
            parent, axis = self.parents[j]
            out[:, j] = out[:, parent] * z[:, axis]
        return out


def eval_basis(basis, x):
    """k(x): the p monomials at one point, constant first."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != basis.d_loc:
        raise ValidationError(
            "Expected a point of dimension %(expected)d, got shape %(shape)s.",
            code="shape",
            params={"expected": basis.d_loc, "shape": x.shape},
        )
    return basis.evaluate(x[None, :])[0]


def numerical_rank(r_diag, rtol=None):
    """Rank read off the diagonal of a column-pivoted triangular factor."""
    rtol = settings.MLKRIG["PIVOT_RTOL"] if rtol is None else rtol
    mags = np.abs(np.asarray(r_diag))
    if mags.size == 0 or mags[0] == 0:
        return 0
    return int(np.count_nonzero(mags > rtol * mags[0]))


def build_design_matrix(basis, locations):
    """X with rows k(x_i); raises degenerate_design unless X has full column rank."""
    locations = as_locations(locations, basis.d_loc)
    n, p = len(locations), basis.p
    if n < p:
        raise ValidationError(
            "%(n)d locations cannot support %(p)d trend columns.",
            code="insufficient_data",
            params={"n": n, "p": p},
        )

    X = basis.evaluate(locations)
    R, _ = qr(X, mode="r", pivoting=True)
    rank = numerical_rank(np.diag(R), rtol=max(settings.MLKRIG["PIVOT_RTOL"], n * np.finfo(float).eps))
    if rank < p:
        raise ValidationError(
            "Design matrix has rank %(rank)d < p = %(p)d (%(deficient)d deficient columns).",
            code="degenerate_design",
            params={"rank": rank, "p": p, "deficient": p - rank},
        )
    return X


def default_leaf_min(p):
    return max(p, settings.MLKRIG["LEAF_MIN_FLOOR"])


# =============================================================================
# kd-tree
# =============================================================================

@dataclass(frozen=True, eq=False)
class KdNode:
    node_id: int
    depth: int
    indices: np.ndarray = field(repr=False)
    axis: int = None
    split: float = None
    children: tuple = ()

    @property
    def is_leaf(self):
        return not self.children

    @property
    def size(self):
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class KdTree:
    root: KdNode
    leaves: tuple
    leaf_min: int
    n: int

    @property
    def levels(self):
        return max(leaf.depth for leaf in self.leaves) + 1

    def nodes(self):
        """All nodes in preorder."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


def build_kdtree(locations, leaf_min):
    """
    Binary kd-tree with median splits along the widest axis.

    A node of n points splits into floor(n/2) and ceil(n/2) points unless
    n < 2*leaf_min, so every leaf holds between leaf_min and 2*leaf_min - 1
    points (or all N when N < 2*leaf_min). Points are ordered by index before
    a stable sort on the split coordinate, so median ties go to the lower index.
    An internal node's ``indices`` are its children's concatenated.
    """
    locations = as_locations(locations)
    n = len(locations)
    leaf_min = int(leaf_min)
    if leaf_min < 1:
        raise ValidationError("leaf_min must be at least 1.", code="parameter_domain")
    if n < leaf_min:
        raise ValidationError(
            "%(n)d locations are fewer than leaf_min = %(leaf_min)d.",
            code="insufficient_data",
            params={"n": n, "leaf_min": leaf_min},
        )

    counter = iter(range(2 * n))
    leaves = []

    def split(idx, depth):
        node_id = next(counter)
        idx = np.sort(idx)
        if len(idx) < 2 * leaf_min:
            leaf = KdNode(node_id=node_id, depth=depth, indices=idx)
            leaves.append(leaf)
            return leaf

        pts = locations[idx]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        order = np.argsort(pts[:, axis], kind="stable")
        half = len(idx) // 2
        left = split(idx[order[:half]], depth + 1)
        right = split(idx[order[half:]], depth + 1)
        return KdNode(
            node_id=node_id,
            depth=depth,
            indices=np.concatenate([left.indices, right.indices]),
            axis=axis,
            split=float(pts[order[half - 1], axis]),
            children=(left, right),
        )

    root = split(np.arange(n), 0)
    tree = KdTree(root=root, leaves=tuple(leaves), leaf_min=leaf_min, n=n)
    logger.debug("kd-tree: %d points, %d leaves, %d levels", n, len(leaves), tree.levels)
    return tree

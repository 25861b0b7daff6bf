"""
Sparse orthogonal multilevel operators W and L built over a kd-tree.

Each leaf factors its block of the design matrix; directions orthogonal to the
local trend columns become rows of W supported on the leaf. The remaining
(scaling) directions move up the tree, where each internal node factors the
stacked trend moments of its two children and emits the new complement
directions as W rows over the node. The root's scaling directions form L.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy.linalg import qr

from kriging.services.design import numerical_rank
from kriging.services.execution import resolve_options

logger = logging.getLogger(__name__)

TRIPLET_HEADER = np.dtype([("rows", "<i8"), ("cols", "<i8"), ("nnz", "<i8")])
TRIPLET_RECORD = np.dtype([("row", "<i8"), ("col", "<i8"), ("value", "<f8")])


@dataclass(frozen=True, eq=False)
class RowBlock:
    """Consecutive W rows emitted by one tree node, dense over ``support``."""

    node_id: int
    level: int
    start: int
    stop: int
    support: np.ndarray = field(repr=False)
    coef: np.ndarray = field(repr=False)

    @property
    def n_rows(self):
        return self.stop - self.start


@dataclass(frozen=True, eq=False)
class MultilevelBasis:
    W: sp.csr_matrix = field(repr=False)
    L: sp.csr_matrix = field(repr=False)
    tree: object = field(repr=False)
    row_blocks: tuple = field(repr=False)
    rank_mode: str = "strict"

    @property
    def n(self):
        return self.W.shape[1]

    @property
    def n_w(self):
        return self.W.shape[0]

    @property
    def p(self):
        return self.L.shape[0]

    @property
    def nnz_W(self):
        return self.W.nnz

    @property
    def nnz(self):
        return self.W.nnz + self.L.nnz

    @property
    def levels(self):
        return self.tree.levels


@dataclass
class _NodeFactor:
    # scaling vectors over the node's indices and their trend moments S^T X
    scaling: np.ndarray
    moments: np.ndarray
    height: int


def _local_rank(R, node, p, mode, rtol):
    rank = numerical_rank(np.diag(R), rtol) if R.size else 0
    target = min(p, R.shape[0])
    if rank < target:
        if mode == "strict":
            raise ValidationError(
                "Local trend block at tree node %(node)d (depth %(depth)d, %(size)d points) "
                "has rank %(rank)d < %(p)d.",
                code="degenerate_design",
                params={"node": node.node_id, "depth": node.depth, "size": node.size, "rank": rank, "p": p},
            )
        logger.warning(
            "Tree node %d (depth %d) has local trend rank %d < %d; passing %d scaling vectors up",
            node.node_id,
            node.depth,
            rank,
            p,
            rank,
        )
    return rank


def _factor_leaf(leaf, X, mode, rtol):
    p = X.shape[1]
    if leaf.size < p and mode == "strict":
        raise ValidationError(
            "Leaf %(node)d holds %(size)d points, fewer than p = %(p)d.",
            code="insufficient_leaf",
            params={"node": leaf.node_id, "size": leaf.size, "p": p},
        )
    Xj = X[leaf.indices]
    Q, R, _ = qr(Xj, mode="full", pivoting=True)
    rank = _local_rank(R, leaf, p, mode, rtol)
    scaling = Q[:, :rank]
    detail = Q[:, rank:].T
    return _NodeFactor(scaling=scaling, moments=scaling.T @ Xj, height=0), detail


def _merge(node, left, right, p, mode, rtol):
    stacked = np.vstack([left.moments, right.moments])
    Q, R, _ = qr(stacked, mode="full", pivoting=True)
    rank = _local_rank(R, node, p, mode, rtol)

    n_left = left.scaling.shape[0]
    r_left = left.scaling.shape[1]
    children = np.zeros((node.size, stacked.shape[0]))
    children[:n_left, :r_left] = left.scaling
    children[n_left:, r_left:] = right.scaling

    scaling = children @ Q[:, :rank]
    detail = (children @ Q[:, rank:]).T
    moments = Q[:, :rank].T @ stacked
    height = 1 + max(left.height, right.height)
    return _NodeFactor(scaling=scaling, moments=moments, height=height), detail


def _blocks_to_csr(blocks, n_rows, n_cols):
    if not blocks:
        return sp.csr_matrix((n_rows, n_cols))
    rows, cols, vals = [], [], []
    for block in blocks:
        r = np.repeat(np.arange(block.start, block.stop), len(block.support))
        rows.append(r)
        cols.append(np.tile(block.support, block.n_rows))
        vals.append(block.coef.ravel())
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, n_cols),
    )


def build_multilevel_basis(X, tree, rank_mode=None, options=None):
    """
    Build W ((N - p) x N) and L (p x N) with [W; L] orthogonal and W X = 0.

    W rows are ordered level by level from the leaves up (a node's level is
    its height above the leaves), left to right inside a level.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n != tree.n:
        raise ValidationError(
            "Design matrix has %(n)d rows but the tree holds %(tree_n)d points.",
            code="shape",
            params={"n": n, "tree_n": tree.n},
        )
    mode = rank_mode or settings.MLKRIG["LOCAL_RANK_MODE"]
    if mode not in ("strict", "adaptive"):
        raise ValidationError("Unknown local rank mode %(mode)r.", code="parameter_domain", params={"mode": mode})
    rtol = settings.MLKRIG["PIVOT_RTOL"]
    options = resolve_options(options)

    leaf_results = options.map(lambda leaf: _factor_leaf(leaf, X, mode, rtol), tree.leaves)
    leaf_factors = {leaf.node_id: result for leaf, result in zip(tree.leaves, leaf_results)}

    # (height, node_id, support, detail)
    pending = []

    def reduce(node):
        if node.is_leaf:
            factor, detail = leaf_factors[node.node_id]
        else:
            left = reduce(node.children[0])
            right = reduce(node.children[1])
            factor, detail = _merge(node, left, right, p, mode, rtol)
        if detail.shape[0]:
            pending.append((factor.height, node.node_id, node.indices, detail))
        return factor

    root = reduce(tree.root)

    pending.sort(key=lambda item: (item[0], item[1]))
    blocks = []
    start = 0
    for height, node_id, support, detail in pending:
        stop = start + detail.shape[0]
        blocks.append(RowBlock(node_id=node_id, level=height, start=start, stop=stop, support=support, coef=detail))
        start = stop

    W = _blocks_to_csr(blocks, start, n)
    L_block = RowBlock(
        node_id=tree.root.node_id, level=root.height, start=0, stop=root.scaling.shape[1],
        support=tree.root.indices, coef=root.scaling.T,
    )
    L = _blocks_to_csr([L_block], L_block.n_rows, n)

    basis = MultilevelBasis(W=W, L=L, tree=tree, row_blocks=tuple(blocks), rank_mode=mode)
    logger.info(
        "Multilevel basis: N=%d, p=%d, W rows=%d, nnz(W)+nnz(L)=%d, levels=%d",
        n,
        p,
        basis.n_w,
        basis.nnz,
        tree.levels,
    )
    return basis


def _check_length(vector, expected, what):
    vector = np.asarray(vector, dtype=float)
    if vector.shape[0] != expected:
        raise ValidationError(
            "%(what)s has length %(got)d, expected %(expected)d.",
            code="shape",
            params={"what": what, "got": vector.shape[0], "expected": expected},
        )
    return vector


def apply_W(basis, v):
    return basis.W @ _check_length(v, basis.n, "Vector")


def apply_Wt(basis, u):
    return basis.W.T @ _check_length(u, basis.n_w, "Multilevel coefficient vector")


def apply_L(basis, v):
    return basis.L @ _check_length(v, basis.n, "Vector")


def dense_orthogonal_complement(X):
    """Reference (W, L) from one full QR of X; dense, for small problems only."""
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    Q, _ = qr(X, mode="full")
    return Q[:, p:].T, Q[:, :p].T


# =============================================================================
# Triplet export
# =============================================================================

def export_triplets(matrix, path):
    """
    Write a sparse matrix as little-endian triplets.

    Layout: header (<i8 rows, <i8 cols, <i8 nnz) followed by nnz records of
    (<i8 row, <i8 col, <f8 value) in row-major order.
    """
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    header = np.array([(coo.shape[0], coo.shape[1], coo.nnz)], dtype=TRIPLET_HEADER)
    body = np.empty(coo.nnz, dtype=TRIPLET_RECORD)
    body["row"] = coo.row[order]
    body["col"] = coo.col[order]
    body["value"] = coo.data[order]
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(body.tobytes())


def read_triplets(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < TRIPLET_HEADER.itemsize:
        raise ValidationError("Triplet file %(path)s is truncated.", code="parse", params={"path": str(path)})
    header = np.frombuffer(raw[: TRIPLET_HEADER.itemsize], dtype=TRIPLET_HEADER)[0]
    body = np.frombuffer(raw[TRIPLET_HEADER.itemsize:], dtype=TRIPLET_RECORD)
    if len(body) != header["nnz"]:
        raise ValidationError(
            "Triplet file %(path)s declares %(nnz)d entries but holds %(got)d.",
            code="parse",
            params={"path": str(path), "nnz": int(header["nnz"]), "got": len(body)},
        )
    shape = (int(header["rows"]), int(header["cols"]))
    return sp.csr_matrix((body["value"], (body["row"], body["col"])), shape=shape)

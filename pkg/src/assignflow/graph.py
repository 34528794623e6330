"""Neighborhood graphs, averaging operators and graph Laplacians.

Nodes are indexed 0..n-1; on image grids the node of pixel (row, col) is
row * width + col.  Neighborhoods are self-inclusive (i is always in N_i)
and symmetric as a relation.  Weight matrices are stored as CSR sparse
matrices with rows summing to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ConvergenceError

__all__ = [
    "NeighborhoodGraph",
    "AveragingOperator",
    "GraphLaplacian",
    "grid_graph",
    "uniform_weights",
    "symmetrize",
    "laplacian",
    "average_rows",
]

SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class NeighborhoodGraph:
    """Undirected neighborhood structure with sorted, self-inclusive index lists."""

    n: int
    neighbors: tuple

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"graph needs at least one node, got n={self.n}")
        if len(self.neighbors) != self.n:
            raise ValueError("neighbor list count does not match node count")


@dataclass(frozen=True)
class AveragingOperator:
    """Row-stochastic nonnegative weight matrix on a neighborhood pattern."""

    matrix: sparse.csr_matrix
    symmetric: bool

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class GraphLaplacian:
    """L = I - Omega for an averaging operator Omega."""

    matrix: sparse.csr_matrix
    symmetric: bool


def grid_graph(height: int, width: int) -> NeighborhoodGraph:
    """4-connected grid of the given shape, each node including itself.

    Boundary nodes simply have fewer neighbors; no wrap-around.
    """
    if height < 1 or width < 1:
        raise ValueError(f"grid dimensions must be positive, got {height}x{width}")
    n = height * width
    lists = []
    for r in range(height):
        for col in range(width):
            i = r * width + col
            nb = [i]
            if r > 0:
                nb.append(i - width)
            if r < height - 1:
                nb.append(i + width)
            if col > 0:
                nb.append(i - 1)
            if col < width - 1:
                nb.append(i + 1)
            lists.append(np.array(sorted(nb), dtype=np.int64))
    return NeighborhoodGraph(n=n, neighbors=tuple(lists))


def uniform_weights(g: NeighborhoodGraph) -> AveragingOperator:
    """Weights 1/|N_i| on every neighborhood, the uniform averaging operator."""
    indptr = np.zeros(g.n + 1, dtype=np.int64)
    indices = np.concatenate(g.neighbors)
    sizes = np.array([len(nb) for nb in g.neighbors], dtype=np.int64)
    indptr[1:] = np.cumsum(sizes)
    data = np.repeat(1.0 / sizes, sizes)
    m = sparse.csr_matrix((data, indices, indptr), shape=(g.n, g.n))
    return AveragingOperator(matrix=m, symmetric=_is_symmetric(m))


def _is_symmetric(m: sparse.csr_matrix) -> bool:
    d = m - m.T
    return d.nnz == 0 or np.max(np.abs(d.data)) <= SYMMETRY_TOL


def symmetrize(w: AveragingOperator, max_sweeps: int = 50, tol: float = 1e-12) -> AveragingOperator:
    """Nearest symmetric row-stochastic operator on the same pattern.

    Averages Omega with its transpose, then applies symmetric Sinkhorn
    rescaling A <- diag(d) A diag(d), d = 1/sqrt(A 1), until row sums return
    to one.  One sweep performs two rescalings, the symmetric counterpart of
    Sinkhorn's row pass plus column pass.  Symmetry is preserved exactly by
    the scaling; a symmetric input is a fixed point.
    """
    a = ((w.matrix + w.matrix.T) * 0.5).tocsr()
    rowsum = np.asarray(a.sum(axis=1)).ravel()
    for _ in range(max_sweeps):
        if np.max(np.abs(rowsum - 1.0)) <= tol:
            return AveragingOperator(matrix=a, symmetric=True)
        for _ in range(2):
            scale = sparse.diags(1.0 / np.sqrt(rowsum))
            a = (scale @ a @ scale).tocsr()
            rowsum = np.asarray(a.sum(axis=1)).ravel()
    if np.max(np.abs(rowsum - 1.0)) <= tol:
        return AveragingOperator(matrix=a, symmetric=True)
    raise ConvergenceError(
        f"row sums not within {tol:.1e} of 1 after {max_sweeps} Sinkhorn sweeps"
    )


def laplacian(w: AveragingOperator) -> GraphLaplacian:
    """Graph Laplacian I - Omega; annihilates constant vectors."""
    n = w.matrix.shape[0]
    m = (sparse.identity(n, format="csr") - w.matrix).tocsr()
    return GraphLaplacian(matrix=m, symmetric=w.symmetric)


def average_rows(w: AveragingOperator, m: np.ndarray) -> np.ndarray:
    """Neighborhood averages Omega @ M; keeps row-stochastic matrices row-stochastic."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != w.matrix.shape[0]:
        raise ValueError(
            f"matrix shape {m.shape} does not match operator size {w.matrix.shape[0]}"
        )
    return w.matrix @ m

"""Sparse symmetric adjacency over message nodes (CSR-style neighbor lists)."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InputError


@dataclass(frozen=True)
class Graph:
    """Immutable neighbor structure; lists are deduplicated and sorted."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    symmetric: bool = True
    self_loops: bool = True

    def neighbors(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degrees(self):
        return np.diff(self.indptr)

    @property
    def num_neighbor_pairs(self):
        return int(self.indices.size)

    def to_csr(self, values=None):
        """Adjacency as scipy CSR; `values` (one per stored pair) default to 1."""
        if values is None:
            values = np.ones(self.indices.size, dtype=np.float64)
        return sp.csr_matrix((values, self.indices, self.indptr), shape=(self.n, self.n))


def build_graph(edges, n, symmetric=True, self_loops=True):
    """Assemble a Graph from (replier, target) pairs.

    A pair (a, b) means "a replies to b", so a joins b's neighborhood.  With
    ``symmetric`` the reversed pair is added too; with ``self_loops`` every
    node joins its own neighborhood.  Duplicates collapse either way.
    """
    rows, cols = [], []
    for a, b in edges:
        if not (0 <= a < n and 0 <= b < n):
            raise InputError(f"edge ({a}, {b}) out of range for n={n}")
        rows.append(b)
        cols.append(a)
        if symmetric:
            rows.append(a)
            cols.append(b)
    if self_loops:
        loop = np.arange(n, dtype=np.int64)
        rows.extend(loop.tolist())
        cols.extend(loop.tolist())
    if n == 0:
        return Graph(0, np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                     symmetric, self_loops)
    mat = sp.coo_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n)
    ).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return Graph(
        n=n,
        indptr=mat.indptr.astype(np.int64),
        indices=mat.indices.astype(np.int64),
        symmetric=symmetric,
        self_loops=self_loops,
    )


def degree_histogram(graph):
    """Map degree -> node count; ingest diagnostic."""
    degrees, counts = np.unique(graph.degrees(), return_counts=True)
    return {int(d): int(c) for d, c in zip(degrees, counts)}

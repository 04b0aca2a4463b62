"""K-nearest-neighbor graphs over per-cell feature vectors.

Graphs are built in whatever feature space the caller supplies (the network
rebuilds them per layer from its current features).  Rows are ordered by
ascending Euclidean distance with ties broken by ascending index, and a cell
is never its own neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NonFiniteError


@dataclass
class KnnGraph:
    neighbor_indices: np.ndarray  # (M, K) int64
    K: int
    _plan: tuple = None  # cached scatter plan for segment_sum

    @property
    def M(self):
        return self.neighbor_indices.shape[0]

    def segment_sum(self, edge_values: np.ndarray) -> np.ndarray:
        """Sum (M*K, k) per-edge rows onto their neighbor node, giving (M, k).

        Much faster than np.add.at: edges are pre-sorted by neighbor index
        once per graph, then reduced over contiguous runs.
        """
        if self._plan is None:
            flat = self.neighbor_indices.ravel()
            perm = np.argsort(flat, kind="stable")
            nodes, starts = np.unique(flat[perm], return_index=True)
            self._plan = (perm, nodes, starts)
        perm, nodes, starts = self._plan
        sums = np.add.reduceat(edge_values[perm], starts, axis=0)
        out = np.zeros((self.M, edge_values.shape[1]))
        out[nodes] = sums
        return out

    def validate(self):
        idx = self.neighbor_indices
        m, k = idx.shape
        if k != self.K:
            raise ContractViolation("K field disagrees with index table width")
        if idx.min() < 0 or idx.max() >= m:
            raise ContractViolation("neighbor index out of range")
        rows = np.arange(m)[:, None]
        if np.any(idx == rows):
            raise ContractViolation("a cell may not be its own neighbor")
        for i in range(m):
            if len(set(idx[i])) != k:
                raise ContractViolation(f"duplicate neighbor in row {i}")

    def dump(self, path):
        """One line per cell, K space-separated neighbor indices."""
        with open(path, "w") as f:
            for row in self.neighbor_indices:
                f.write(" ".join(str(int(j)) for j in row) + "\n")


def build_knn(features, K: int, method: str = "gram") -> KnnGraph:
    """Exact Euclidean KNN.

    method="exact" computes per-pair squared distances directly (the
    reference); method="gram" uses |x|^2 + |y|^2 - 2 x.y via one matrix
    product, which is much faster and must select identical neighbors.
    """
    X = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    if X.ndim != 2:
        raise ContractViolation("features must be M x d")
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("non-finite feature values")
    m = X.shape[0]
    if K < 1:
        raise ContractViolation("K must be >= 1")
    if K >= m:
        raise ContractViolation(f"K={K} must be smaller than M={m}")

    if method == "gram":
        # the Gram form only screens candidates: its rounding differs from
        # the difference form, so the final ranking recomputes exact
        # distances for K + pad candidates per row
        sq = (X * X).sum(axis=1)
        D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
        np.fill_diagonal(D, np.inf)
        pad = min(m - 1, K + 16)
        cand = np.argpartition(D, pad - 1, axis=1)[:, :pad]
        cand = np.take_along_axis(cand, np.argsort(cand, axis=1), axis=1)
        diff = X[cand] - X[:, None, :]
        d2 = (diff * diff).sum(axis=2)
        sel = np.argsort(d2, axis=1, kind="stable")[:, :K]
        order = np.take_along_axis(cand, sel, axis=1)
        return KnnGraph(neighbor_indices=order.astype(np.int64), K=K)
    if method == "exact":
        D = np.empty((m, m), dtype=np.float64)
        chunk = max(1, int(2**24 // (m * X.shape[1] + 1)))
        for lo in range(0, m, chunk):
            hi = min(lo + chunk, m)
            diff = X[lo:hi, None, :] - X[None, :, :]
            D[lo:hi] = (diff * diff).sum(axis=2)
    else:
        raise ContractViolation(f"unknown method {method!r}")

    np.fill_diagonal(D, np.inf)
    # stable sort on distance keeps ties in original (ascending index) order
    order = np.argsort(D, axis=1, kind="stable")[:, :K]
    return KnnGraph(neighbor_indices=order.astype(np.int64), K=K)

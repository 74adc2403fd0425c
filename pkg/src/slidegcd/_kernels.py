"""Hot loops for graph construction, with numba and pure-numpy implementations.

The numba path is used when numba imports cleanly and the environment variable
``SLIDEGCD_DISABLE_NUMBA`` is unset (or "0"). Both paths return identical
results; ``tests/test_kernels.py`` checks them against each other.

Hyperedges are passed as a padded ``int64`` array of shape (E, S) where unused
slots hold -1. The first member of a row is its anchor.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("SLIDEGCD_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError("numba disabled by SLIDEGCD_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ----------------------------------------------------------------------------
# numpy reference path


def knn_indices_numpy(points: np.ndarray, k: int) -> np.ndarray:
    n = points.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        diff = points - points[i]
        d = np.einsum("ij,ij->i", diff, diff)
        d[i] = np.inf
        # stable sort keeps the smaller index first among equal distances
        out[i] = np.argsort(d, kind="stable")[:k]
    return out


def _incidence(edges: np.ndarray, n: int) -> np.ndarray:
    m = np.zeros((n, edges.shape[0]), dtype=np.float64)
    rows, cols = np.nonzero(edges >= 0)
    m[edges[rows, cols], rows] = 1.0
    return m


def hypergraph_operator_numpy(edges: np.ndarray, n: int) -> np.ndarray:
    m = _incidence(edges, n)
    dv = m.sum(axis=1)
    de = m.sum(axis=0)
    inv_sqrt_dv = 1.0 / np.sqrt(dv)
    return (inv_sqrt_dv[:, None] * m / de[None, :]) @ (m.T * inv_sqrt_dv[None, :])


def star_adjacency_numpy(edges: np.ndarray, n: int) -> np.ndarray:
    adj = np.zeros((n, n), dtype=np.float64)
    for row in edges:
        anchor = row[0]
        for v in row[1:]:
            if v >= 0 and v != anchor:
                adj[anchor, v] = 1.0
                adj[v, anchor] = 1.0
    np.fill_diagonal(adj, 1.0)
    return adj


def gcn_operator_numpy(edges: np.ndarray, n: int) -> np.ndarray:
    adj = star_adjacency_numpy(edges, n)
    inv_sqrt = 1.0 / np.sqrt(adj.sum(axis=1))
    return inv_sqrt[:, None] * adj * inv_sqrt[None, :]


# ----------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def knn_indices_numba(points, k):
        n, dim = points.shape
        out = np.empty((n, k), dtype=np.int64)
        best_d = np.empty(k, dtype=np.float64)
        best_i = np.empty(k, dtype=np.int64)
        for i in range(n):
            filled = 0
            for j in range(n):
                if j == i:
                    continue
                d = 0.0
                for c in range(dim):
                    t = points[j, c] - points[i, c]
                    d += t * t
                if filled == k and d >= best_d[k - 1]:
                    continue
                # insert after every entry with distance <= d (index order is ascending)
                pos = filled if filled < k else k - 1
                while pos > 0 and best_d[pos - 1] > d:
                    if pos < k:
                        best_d[pos] = best_d[pos - 1]
                        best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = d
                best_i[pos] = j
                if filled < k:
                    filled += 1
            for s in range(k):
                out[i, s] = best_i[s]
        return out

    @njit(cache=True)
    def hypergraph_operator_numba(edges, n):
        n_edges, width = edges.shape
        dv = np.zeros(n, dtype=np.float64)
        de = np.zeros(n_edges, dtype=np.float64)
        for e in range(n_edges):
            for s in range(width):
                v = edges[e, s]
                if v >= 0:
                    dv[v] += 1.0
                    de[e] += 1.0
        op = np.zeros((n, n), dtype=np.float64)
        for e in range(n_edges):
            w = 1.0 / de[e]
            for a in range(width):
                u = edges[e, a]
                if u < 0:
                    continue
                for b in range(width):
                    v = edges[e, b]
                    if v < 0:
                        continue
                    op[u, v] += w / np.sqrt(dv[u] * dv[v])
        return op

    @njit(cache=True)
    def star_adjacency_numba(edges, n):
        adj = np.zeros((n, n), dtype=np.float64)
        n_edges, width = edges.shape
        for e in range(n_edges):
            anchor = edges[e, 0]
            for s in range(1, width):
                v = edges[e, s]
                if v >= 0 and v != anchor:
                    adj[anchor, v] = 1.0
                    adj[v, anchor] = 1.0
        for i in range(n):
            adj[i, i] = 1.0
        return adj

    @njit(cache=True)
    def gcn_operator_numba(edges, n):
        adj = star_adjacency_numba(edges, n)
        deg = np.zeros(n, dtype=np.float64)
        for i in range(n):
            for j in range(n):
                deg[i] += adj[i, j]
        for i in range(n):
            for j in range(n):
                if adj[i, j] != 0.0:
                    adj[i, j] = adj[i, j] / np.sqrt(deg[i] * deg[j])
        return adj

    knn_indices = knn_indices_numba
    hypergraph_operator = hypergraph_operator_numba
    gcn_operator = gcn_operator_numba
else:
    knn_indices = knn_indices_numpy
    hypergraph_operator = hypergraph_operator_numpy
    gcn_operator = gcn_operator_numpy

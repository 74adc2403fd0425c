"""Slide graph construction and the graph branch (SlideGNN).

Nodes are slide embeddings (buffer rows followed by the current batch). Each
node anchors one hyperedge made of itself and its ``k`` nearest neighbours in a
fixed random projection of the embeddings. Two convolution layers refine the
nodes, the hop outputs are concatenated, reweighted by mean-centred channel
attention and classified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import numerics as nx
from .errors import ConfigError, DimensionError, GraphError, ParameterError
from .numerics import Tensor

CONV_VARIANTS = ("hyper", "gcn")


@dataclass
class SlideGraph:
    X0: Tensor
    edges: np.ndarray  # (N, k + 1) int64, anchor in column 0, then neighbours nearest first
    P: np.ndarray  # (N, D_proj) projected coordinates

    @property
    def num_nodes(self) -> int:
        return self.edges.shape[0]

    @property
    def hyperedges(self) -> list[frozenset[int]]:
        return [frozenset(int(v) for v in row if v >= 0) for row in self.edges]


@dataclass
class GnnParams:
    proj: np.ndarray  # (D_s, D_proj) fixed, never trained
    theta1: Tensor  # (D_s, D_s)
    theta2: Tensor  # (D_s, D_s)
    W0: Tensor  # (3 D_s, r)
    W1: Tensor  # (r, 3 D_s)
    cls_W: Tensor  # (3 D_s, C)
    cls_b: Tensor  # (C,)
    slope: float = 0.01

    def tensors(self) -> dict[str, Tensor]:
        return {"theta1": self.theta1, "theta2": self.theta2, "W0": self.W0, "W1": self.W1,
                "cls_W": self.cls_W, "cls_b": self.cls_b}


@dataclass
class GnnActivations:
    X1: Tensor
    X2: Tensor
    H: Tensor
    a: Tensor
    H_prime: Tensor
    logits: Tensor  # rows selected by the batch mask


def attention_rank(d_s: int) -> int:
    return max(1, (3 * d_s) // 4)


def init_gnn_params(d_s: int, num_classes: int, rng: np.random.Generator, d_proj: int = 128,
                    identity_projection: bool = False, slope: float = 0.01,
                    rank: int | None = None, dtype=np.float32) -> GnnParams:
    r = attention_rank(d_s) if rank is None else rank
    if r < 1:
        raise ConfigError(f"attention rank must be >= 1, got {r}")
    if identity_projection:
        proj = np.eye(d_s)
    else:
        proj = rng.normal(0.0, 1.0 / np.sqrt(d_proj), size=(d_s, d_proj))

    def p(shape, fan_in):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(dtype), requires_grad=True)

    h = 3 * d_s
    return GnnParams(
        proj=proj.astype(dtype),
        theta1=p((d_s, d_s), d_s),
        theta2=p((d_s, d_s), d_s),
        W0=p((h, r), h),
        W1=p((r, h), r),
        cls_W=p((h, num_classes), h),
        cls_b=Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True),
        slope=slope,
    )


# ----------------------------------------------------------------------------
# graph construction


def build_graph(X0, proj: np.ndarray | None, k: int) -> SlideGraph:
    """Hyperedge ``{i} + kNN(i)`` for every node, in the space ``X0 @ proj``.

    Distances are Euclidean; among equal distances the smaller index wins.
    ``proj=None`` means the identity projection.
    """
    X0 = nx.as_tensor(X0)
    n = X0.shape[0]
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ParameterError(f"k={k} needs more than {k} nodes, got {n}")
    x = X0.data.astype(np.float64)
    if proj is None:
        P = np.ascontiguousarray(x)
    else:
        proj = np.asarray(proj, dtype=np.float64)
        if proj.ndim != 2 or proj.shape[0] != x.shape[1] or proj.shape[1] < 1:
            raise DimensionError(f"projection {proj.shape} does not conform to nodes {x.shape}")
        P = np.ascontiguousarray(x @ proj)
    nbrs = _kernels.knn_indices(P, k)
    edges = np.concatenate([np.arange(n, dtype=np.int64)[:, None], nbrs], axis=1)
    return SlideGraph(X0, edges, P)


def pad_edges(edges) -> np.ndarray:
    """Accept a padded array or any iterable of node sets; return a padded int64 array."""
    if isinstance(edges, np.ndarray):
        return edges.astype(np.int64, copy=False)
    rows = [list(e) for e in edges]
    width = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), width), -1, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def _validate_edges(edges: np.ndarray, n: int) -> None:
    if edges.size and edges.max() >= n:
        raise GraphError(f"hyperedge references node {int(edges.max())} but only {n} nodes exist")
    degree = np.bincount(edges[edges >= 0].ravel(), minlength=n)
    isolated = np.flatnonzero(degree == 0)
    if isolated.size:
        raise GraphError(f"nodes {isolated[:10].tolist()} belong to no hyperedge")


def propagation_matrix(edges, n: int, conv: str = "hyper") -> np.ndarray:
    """Dense normalised propagation operator for ``conv`` in {"hyper", "gcn"}."""
    edges = pad_edges(edges)
    _validate_edges(edges, n)
    if conv == "hyper":
        return _kernels.hypergraph_operator(edges, n)
    if conv == "gcn":
        return _kernels.gcn_operator(edges, n)
    raise ConfigError(f"unknown conv variant {conv!r}; expected one of {CONV_VARIANTS}")


def _conv(X, op: np.ndarray, theta, slope: float) -> Tensor:
    X = nx.as_tensor(X)
    theta = nx.as_tensor(theta)
    if X.shape[1] != theta.shape[0]:
        raise DimensionError(f"node features {X.shape} do not conform to weight {theta.shape}")
    A = Tensor(op.astype(X.dtype))
    return nx.leaky_relu(nx.matmul(nx.matmul(A, X), theta), slope)


def hypergraph_conv(X, edges, theta, slope: float = 0.01, op: np.ndarray | None = None) -> Tensor:
    """``LeakyReLU(Dv^-1/2 M De^-1 M^T Dv^-1/2 X theta)`` with unit hyperedge weights."""
    X = nx.as_tensor(X)
    if op is None:
        op = propagation_matrix(edges, X.shape[0], "hyper")
    return _conv(X, op, theta, slope)


def gcn_conv(X, edges, theta, slope: float = 0.01, op: np.ndarray | None = None) -> Tensor:
    """Symmetric-normalised GCN layer on the star expansion of ``edges`` (plus self-loops)."""
    X = nx.as_tensor(X)
    if op is None:
        op = propagation_matrix(edges, X.shape[0], "gcn")
    return _conv(X, op, theta, slope)


def hop_concat(X0, X1, X2) -> Tensor:
    X0, X1, X2 = (nx.as_tensor(x) for x in (X0, X1, X2))
    if not X0.shape == X1.shape == X2.shape:
        raise DimensionError(f"hop outputs differ in shape: {X0.shape}, {X1.shape}, {X2.shape}")
    return nx.concat([X0, X1, X2], axis=1)


def channel_scores(H, W0, W1) -> Tensor:
    """Uncentred channel attention ``sigmoid(relu(mean_nodes(H) W0) W1)`` as a (1, 3 D_s) row."""
    H = nx.as_tensor(H)
    W0, W1 = nx.as_tensor(W0), nx.as_tensor(W1)
    if H.shape[1] != W0.shape[0] or W0.shape[1] != W1.shape[0] or W1.shape[1] != H.shape[1]:
        raise DimensionError(f"attention weights {W0.shape}, {W1.shape} do not fit features {H.shape}")
    z = nx.mean(H, axis=0, keepdims=True)
    return nx.sigmoid(nx.matmul(nx.relu(nx.matmul(z, W0)), W1))


def center_scores(a) -> Tensor:
    a = nx.as_tensor(a)
    return nx.sub(a, nx.mean(a, axis=-1, keepdims=True))


def centering_attention(H, W0, W1, scores=None) -> tuple[Tensor, Tensor]:
    """Scale every channel of ``H`` by its mean-centred attention score.

    ``scores`` overrides the computed (uncentred) attention. Returns ``(H', a)``.
    """
    H = nx.as_tensor(H)
    a = channel_scores(H, W0, W1) if scores is None else nx.reshape(nx.as_tensor(scores), (1, -1))
    if a.shape[1] != H.shape[1]:
        raise DimensionError(f"{a.shape[1]} attention scores for {H.shape[1]} channels")
    return nx.mul(H, center_scores(a)), a


def mask_indices(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise IndexError(f"boolean mask of shape {mask.shape} for {n} nodes")
        return np.flatnonzero(mask)
    idx = mask.astype(np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"mask index out of range for {n} nodes")
    return idx


def graph_classify(H_prime, W, b, mask) -> Tensor:
    """Logits of the masked rows only; other rows never reach the task loss."""
    H_prime = nx.as_tensor(H_prime)
    idx = mask_indices(mask, H_prime.shape[0])
    return nx.linear_forward(nx.take_rows(H_prime, idx), W, b)


def slide_gnn_forward(graph: SlideGraph, params: GnnParams, mask, conv: str = "hyper") -> GnnActivations:
    X0 = graph.X0
    op = propagation_matrix(graph.edges, graph.num_nodes, conv)
    X1 = _conv(X0, op, params.theta1, params.slope)
    X2 = _conv(X1, op, params.theta2, params.slope)
    H = hop_concat(X0, X1, X2)
    H_prime, a = centering_attention(H, params.W0, params.W1)
    logits = graph_classify(H_prime, params.cls_W, params.cls_b, mask)
    return GnnActivations(X1, X2, H, a, H_prime, logits)

"""Class-aware node buffer: FIFO warmup, centre-based replacement and its loss."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, InputError, ParameterError, StateError
from .numerics import Tensor


@dataclass
class BufferEntry:
    embedding: np.ndarray
    label: int
    counter: int


class NodeBuffer:
    """``num_classes`` sub-queues of ``capacity // num_classes`` detached embeddings each.

    Sub-queues are kept in slot order. During warmup a full sub-queue drops its
    oldest slot (FIFO); formal replacement overwrites a slot in place.
    """

    def __init__(self, capacity: int, num_classes: int, dim: int, dtype=np.float32):
        if num_classes < 1 or capacity < num_classes:
            raise ConfigError(f"buffer capacity {capacity} too small for {num_classes} classes")
        if capacity % num_classes:
            raise ConfigError(f"buffer capacity {capacity} must be divisible by class count {num_classes}")
        self.capacity = capacity
        self.num_classes = num_classes
        self.dim = dim
        self.dtype = np.dtype(dtype)
        self.per_class = capacity // num_classes
        self.queues: list[list[BufferEntry]] = [[] for _ in range(num_classes)]
        self.counter = 0

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues)

    @property
    def is_full(self) -> bool:
        return all(len(q) == self.per_class for q in self.queues)

    def sizes(self) -> list[int]:
        return [len(q) for q in self.queues]

    def _check(self, U: np.ndarray, labels: np.ndarray) -> None:
        if U.ndim != 2 or U.shape[1] != self.dim:
            raise DimensionError(f"embeddings of shape {U.shape} do not match buffer width {self.dim}")
        if len(labels) != U.shape[0]:
            raise DimensionError(f"{U.shape[0]} embeddings but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def _new_entry(self, u: np.ndarray, label: int) -> BufferEntry:
        self.counter += 1
        return BufferEntry(np.array(u, dtype=self.dtype), int(label), self.counter)

    def embeddings(self) -> np.ndarray:
        rows = [e.embedding for q in self.queues for e in q]
        if not rows:
            return np.zeros((0, self.dim), dtype=self.dtype)
        return np.stack(rows)

    def labels(self) -> np.ndarray:
        return np.array([e.label for q in self.queues for e in q], dtype=np.int64)

    def counters(self) -> np.ndarray:
        return np.array([e.counter for q in self.queues for e in q], dtype=np.int64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.embeddings()).tobytes())
        h.update(self.labels().tobytes())
        h.update(self.counters().tobytes())
        return h.hexdigest()

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "embeddings": self.embeddings(),
            "labels": self.labels(),
            "counters": self.counters(),
            "meta": np.array([self.capacity, self.num_classes, self.dim, self.counter], dtype=np.int64),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], dtype=np.float32) -> "NodeBuffer":
        capacity, num_classes, dim, counter = (int(v) for v in arrays["meta"])
        buf = cls(capacity, num_classes, dim, dtype)
        for u, y, c in zip(arrays["embeddings"], arrays["labels"], arrays["counters"]):
            buf.queues[int(y)].append(BufferEntry(np.array(u, dtype=buf.dtype), int(y), int(c)))
        buf.counter = counter
        buf.assert_invariants()
        return buf

    def assert_invariants(self) -> None:
        for c, q in enumerate(self.queues):
            if len(q) > self.per_class:
                raise StateError(f"sub-queue {c} holds {len(q)} > {self.per_class} entries")
            for e in q:
                if e.label != c:
                    raise StateError(f"sub-queue {c} holds an entry labelled {e.label}")


def warmup_push(buffer: NodeBuffer, U, labels, rng: np.random.Generator | None = None) -> NodeBuffer:
    """Append each embedding to its class sub-queue, evicting the oldest slot when full.

    With ``rng`` the batch is pushed in a random order.
    """
    U = np.asarray(nx.as_tensor(U).data)
    labels = np.asarray(labels, dtype=np.int64)
    buffer._check(U, labels)
    order = rng.permutation(len(labels)) if rng is not None else range(len(labels))
    for i in order:
        q = buffer.queues[labels[i]]
        if len(q) == buffer.per_class:
            q.pop(0)
        q.append(buffer._new_entry(U[i], labels[i]))
    return buffer


@dataclass
class ClassCenters:
    q: np.ndarray  # (C, D_s)
    tau: float = 0.5


def compute_centers(buffer: NodeBuffer, tau: float = 0.5) -> ClassCenters:
    q = np.empty((buffer.num_classes, buffer.dim), dtype=np.float64)
    for c, queue in enumerate(buffer.queues):
        if not queue:
            raise StateError(f"sub-queue {c} is empty; the warmup stage must fill every class first")
        q[c] = np.mean(np.stack([e.embedding for e in queue]).astype(np.float64), axis=0)
    return ClassCenters(q, tau)


def formal_update(buffer: NodeBuffer, U, labels, centers: ClassCenters) -> np.ndarray:
    """Sequentially let each embedding replace the farthest slot of its sub-queue if closer.

    Distances are Euclidean, measured to the centres passed in (computed once at
    the start of the mini-batch). Returns one accepted flag per embedding.
    """
    U = np.asarray(nx.as_tensor(U).data)
    labels = np.asarray(labels, dtype=np.int64)
    buffer._check(U, labels)
    accepted = np.zeros(len(labels), dtype=bool)
    for i, (u, y) in enumerate(zip(U, labels)):
        q = buffer.queues[y]
        if not q:
            raise StateError(f"sub-queue {y} is empty")
        center = centers.q[y]
        stored = np.stack([e.embedding for e in q]).astype(np.float64)
        dists = np.sqrt(((stored - center) ** 2).sum(axis=1))
        far = int(np.argmax(dists))
        if np.sqrt(((u.astype(np.float64) - center) ** 2).sum()) < dists[far]:
            q[far] = buffer._new_entry(u, y)
            accepted[i] = True
    return accepted


def buffer_update_loss(U, labels, centers: ClassCenters, tau: float | None = None,
                       return_terms: bool = False):
    """Contrastive pull toward the own-class centre plus cosine push from the others.

    Both terms are averaged over the batch. Centres are constants. With
    ``return_terms`` the two terms are returned as well, as floats.
    """
    tau = centers.tau if tau is None else tau
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    U = nx.as_tensor(U)
    labels = np.asarray(labels, dtype=np.int64)
    B = U.shape[0]
    C = centers.q.shape[0]
    if B == 0:
        zero = Tensor(np.zeros((), dtype=U.dtype))
        return (zero, 0.0, 0.0) if return_terms else zero
    if U.shape[1] != centers.q.shape[1]:
        raise DimensionError(f"embeddings {U.shape} vs centres {centers.q.shape}")
    q = centers.q.astype(U.dtype)
    q_norm = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(q_norm == 0):
        raise InputError("a class centre has zero norm")
    q_hat = q / q_norm

    u_hat = nx.l2_normalize(U, axis=1)
    cos = nx.matmul(u_hat, q_hat.T)  # (B, C)
    onehot = np.zeros((B, C), dtype=U.dtype)
    onehot[np.arange(B), labels] = 1.0
    logp = nx.log_softmax(nx.mul(cos, 1.0 / tau), axis=1)
    term1 = nx.mul(nx.sum_(nx.mul(logp, onehot)), -1.0 / B)
    term2 = nx.mul(nx.sum_(nx.mul(cos, 1.0 - onehot)), 1.0 / B)
    loss = nx.add(term1, term2)
    if return_terms:
        return loss, float(term1.data), float(term2.data)
    return loss


def snapshot_nodes(buffer: NodeBuffer, U, labels):
    """Node matrix with buffer rows first (constant) and batch rows last.

    Returns ``(X0, node_labels, batch_mask)``.
    """
    if not buffer.is_full:
        raise StateError(f"buffer not full ({buffer.sizes()} of {buffer.per_class} per class)")
    U = nx.as_tensor(U)
    labels = np.asarray(labels, dtype=np.int64)
    stored = Tensor(buffer.embeddings().astype(U.dtype if U.data.size else buffer.dtype))
    if U.shape[0] == 0:
        X0 = stored
    else:
        if U.data.ndim != 2 or U.shape[1] != buffer.dim:
            raise DimensionError(f"batch of shape {U.shape} does not match buffer width {buffer.dim}")
        X0 = nx.concat([stored, U], axis=0)
    node_labels = np.concatenate([buffer.labels(), labels])
    mask = np.zeros(len(node_labels), dtype=bool)
    mask[len(buffer):] = True
    return X0, node_labels, mask

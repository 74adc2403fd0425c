"""MIL backbones (bag -> slide embedding) and the MIL classification head.

Any backbone works with the graph branch as long as it maps a bag of any size
to a fixed-width row. Two are provided:

``abmil``
    gated attention pooling followed by an affine projection.
``precomputed``
    each bag already holds its slide embedding as a single row; no parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, InputError
from .numerics import Tensor

BACKBONES = ("abmil", "precomputed")


@dataclass
class BackboneParams:
    V: Tensor  # (D_patch, D_a) tanh branch
    U: Tensor  # (D_patch, D_a) sigmoid gate
    w: Tensor  # (D_a, 1)
    proj_W: Tensor  # (D_patch, D_s)
    proj_b: Tensor  # (D_s,)

    def tensors(self) -> dict[str, Tensor]:
        return {"V": self.V, "U": self.U, "w": self.w, "proj_W": self.proj_W, "proj_b": self.proj_b}


@dataclass
class MilHeadParams:
    W: Tensor  # (D_s, C)
    b: Tensor  # (C,)

    def tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


def init_backbone_params(d_patch: int, d_s: int, rng: np.random.Generator, attn_dim: int = 64,
                         dtype=np.float32) -> BackboneParams:
    def p(a):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

    if d_s == d_patch:
        proj = np.eye(d_patch)
    else:
        proj = rng.normal(0.0, 1.0 / np.sqrt(d_patch), size=(d_patch, d_s))
    return BackboneParams(
        V=p(rng.normal(0.0, 1.0 / np.sqrt(d_patch), size=(d_patch, attn_dim))),
        U=p(rng.normal(0.0, 1.0 / np.sqrt(d_patch), size=(d_patch, attn_dim))),
        w=p(rng.normal(0.0, 1.0 / np.sqrt(attn_dim), size=(attn_dim, 1))),
        proj_W=p(proj),
        proj_b=p(np.zeros(d_s)),
    )


def init_mil_head(d_s: int, num_classes: int, rng: np.random.Generator, dtype=np.float32) -> MilHeadParams:
    return MilHeadParams(
        W=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_s), size=(d_s, num_classes)).astype(dtype), requires_grad=True),
        b=Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True),
    )


def attention_weights(patches, params: BackboneParams) -> Tensor:
    """Gated attention over the patches of one bag, shape (M, 1), summing to one."""
    x = nx.as_tensor(patches)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise InputError(f"bag must be a non-empty (M, D) matrix, got shape {x.shape}")
    if x.shape[1] != params.V.shape[0]:
        raise DimensionError(f"bag width {x.shape[1]} does not match backbone input width {params.V.shape[0]}")
    gate = nx.mul(nx.tanh(nx.matmul(x, params.V)), nx.sigmoid(nx.matmul(x, params.U)))
    return nx.softmax(nx.matmul(gate, params.w), axis=0)


def backbone_embed(patches, params: BackboneParams) -> Tensor:
    """Slide embedding of one bag as a (1, D_s) row."""
    x = nx.as_tensor(patches)
    a = attention_weights(x, params)
    pooled = nx.matmul(nx.transpose(a), x)
    return nx.linear_forward(pooled, params.proj_W, params.proj_b)


def mil_head(s, params: MilHeadParams) -> Tensor:
    s = nx.as_tensor(s)
    if s.data.ndim == 1:
        s = nx.reshape(s, (1, -1))
    if s.shape[1] != params.W.shape[0]:
        raise DimensionError(f"slide embedding width {s.shape[1]} does not match head input {params.W.shape[0]}")
    return nx.linear_forward(s, params.W, params.b)


class AttentionMIL:
    """Gated-attention pooling backbone."""

    name = "abmil"

    def __init__(self, params: BackboneParams):
        self.params = params

    @classmethod
    def create(cls, d_patch: int, d_s: int, rng, attn_dim: int = 64, dtype=np.float32) -> "AttentionMIL":
        return cls(init_backbone_params(d_patch, d_s, rng, attn_dim, dtype))

    @property
    def in_dim(self) -> int:
        return self.params.V.shape[0]

    @property
    def out_dim(self) -> int:
        return self.params.proj_W.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return self.params.tensors()

    def embed(self, patches) -> Tensor:
        return backbone_embed(np.asarray(patches, dtype=self.params.V.dtype), self.params)


class PrecomputedBackbone:
    """Identity backbone for bags that already are single slide embeddings."""

    name = "precomputed"

    def __init__(self, dim: int, dtype=np.float32):
        self.dim = dim
        self.dtype = dtype

    in_dim = property(lambda self: self.dim)
    out_dim = property(lambda self: self.dim)

    def tensors(self) -> dict[str, Tensor]:
        return {}

    def embed(self, patches) -> Tensor:
        x = np.asarray(patches, dtype=self.dtype)
        if x.ndim != 2 or x.shape[0] != 1:
            raise InputError(f"precomputed backbone expects a single-row bag, got shape {x.shape}")
        if x.shape[1] != self.dim:
            raise DimensionError(f"bag width {x.shape[1]} does not match embedding width {self.dim}")
        return Tensor(x)


def make_backbone(name: str, d_patch: int, d_s: int, rng, attn_dim: int = 64, dtype=np.float32):
    if name == "abmil":
        return AttentionMIL.create(d_patch, d_s, rng, attn_dim, dtype)
    if name == "precomputed":
        if d_patch != d_s:
            raise ConfigError(f"precomputed backbone needs embed_dim == patch dim ({d_s} != {d_patch})")
        return PrecomputedBackbone(d_s, dtype)
    raise ConfigError(f"unknown backbone {name!r}; expected one of {BACKBONES}")


def embed_batch(backbone, bags) -> Tensor:
    """Stack the embeddings of several bags into a (B, D_s) matrix."""
    return nx.concat([backbone.embed(b) for b in bags], axis=0)

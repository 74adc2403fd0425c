"""Two-stage training, frozen-buffer inference and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .backbone import embed_batch, init_mil_head, make_backbone, mil_head, MilHeadParams
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import Dataset, PatchBag
from .errors import ConfigError, DimensionError, InputError, StateError, TrainingError
from .metrics import Metrics, compute_metrics
from .numerics import GradTape, OptimState, Tensor
from .objectives import (DISTILL, FusionParams, LossBreakdown, cross_entropy, fuse, init_fusion_params,
                         kd_js, kd_kl, softened, total_loss)
from .rehearsal import (NodeBuffer, buffer_update_loss, compute_centers, formal_update, snapshot_nodes,
                        warmup_push)
from .slidegraph import GnnParams, build_graph, init_gnn_params, mask_indices, slide_gnn_forward

log = logging.getLogger(__name__)

DTYPE = np.float32


class SlideGCDModel:
    """All learnable weights plus the node buffer."""

    def __init__(self, config: TrainConfig, patch_dim: int, backbone, head: MilHeadParams,
                 gnn: GnnParams, fusion: FusionParams, buffer: NodeBuffer):
        self.config = config
        self.patch_dim = patch_dim
        self.backbone = backbone
        self.head = head
        self.gnn = gnn
        self.fusion = fusion
        self.buffer = buffer

    @classmethod
    def create(cls, config: TrainConfig, patch_dim: int, rng: np.random.Generator) -> "SlideGCDModel":
        config.validate()
        d_s = config.embed_dim or patch_dim
        backbone = make_backbone(config.backbone, patch_dim, d_s, rng, config.attn_dim, DTYPE)
        head = init_mil_head(d_s, config.num_classes, rng, DTYPE)
        gnn = init_gnn_params(d_s, config.num_classes, rng, config.proj_dim, config.identity_projection,
                              config.leaky_slope, config.attn_rank, DTYPE)
        fusion = init_fusion_params(config.strategy, d_s, config.num_classes, rng, DTYPE)
        buffer = NodeBuffer(config.buffer_size, config.num_classes, d_s, DTYPE)
        return cls(config, patch_dim, backbone, head, gnn, fusion, buffer)

    @property
    def embed_dim(self) -> int:
        return self.backbone.out_dim

    def mil_parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.tensors().items()}
        out.update({f"head.{k}": v for k, v in self.head.tensors().items()})
        return out

    def graph_parameters(self) -> dict[str, Tensor]:
        out = {f"gnn.{k}": v for k, v in self.gnn.tensors().items()}
        out.update({f"fusion.{k}": v for k, v in self.fusion.tensors().items()})
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {**self.mil_parameters(), **self.graph_parameters()}

    # ------------------------------------------------------------------
    # forward pieces

    def embed(self, bags: Sequence) -> Tensor:
        return embed_batch(self.backbone, [b.embeddings if isinstance(b, PatchBag) else b for b in bags])

    def graph_forward(self, X0: Tensor, mask: np.ndarray, S: Tensor, mil_logits: Tensor):
        """Graph-branch logits and final (strategy-dependent) logits for the masked rows."""
        graph = build_graph(X0, self.gnn.proj, self.config.k)
        act = slide_gnn_forward(graph, self.gnn, mask, self.config.conv)
        h_batch = nx.take_rows(act.H_prime, mask_indices(mask, graph.num_nodes))
        final = fuse(self.config.strategy, act.logits, mil_logits, S, h_batch, self.fusion)
        return graph, act, final

    # ------------------------------------------------------------------
    # checkpoint round trip

    def to_checkpoint(self, train_log: list | None = None) -> Checkpoint:
        params = {name: t.data.copy() for name, t in self.parameters().items()}
        params["gnn.proj"] = self.gnn.proj.copy()
        return Checkpoint(self.config.to_dict(), self.patch_dim, params, self.buffer.to_arrays(),
                          list(train_log or []))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SlideGCDModel":
        config = TrainConfig.from_dict(ckpt.config).validate()
        model = cls.create(config, ckpt.patch_dim, np.random.default_rng(0))
        expected = model.parameters()
        missing = sorted(set(expected) - set(ckpt.params))
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {', '.join(missing)}")
        for name, t in expected.items():
            arr = ckpt.params[name]
            if arr.shape != t.shape:
                raise DimensionError(f"checkpoint parameter {name} has shape {arr.shape}, expected {t.shape}")
            t.data = np.array(arr, dtype=DTYPE)
        model.gnn.proj = np.array(ckpt.params["gnn.proj"], dtype=DTYPE)
        model.buffer = NodeBuffer.from_arrays(ckpt.buffer, DTYPE)
        return model


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SlideGCDModel
    log: list[dict] = field(default_factory=list)

    @property
    def step_losses(self) -> list[float]:
        return [r["total"] for r in self.log if r["record"] == "step"]

    def checkpoint(self) -> Checkpoint:
        return self.model.to_checkpoint(self.log)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _step(params: dict[str, Tensor], state: OptimState, loss: LossBreakdown, lr: float) -> None:
    if loss.tensor is None or not math.isfinite(loss.total):
        raise TrainingError(f"non-finite loss: {loss.as_dict()}")
    grads = {k: p.grad for k, p in params.items()}
    nx.adam_step(params, grads, state, lr)


def train(config: TrainConfig, dataset: Dataset,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Warmup (MIL branch only, FIFO buffer) followed by the formal collaborative stage."""
    config.validate()
    if dataset.num_classes != config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, config says {config.num_classes}")
    dataset.check_train_classes()
    bags = dataset.split("train")
    patch_dim = bags[0].dim
    if any(b.dim != patch_dim for b in bags):
        raise InputError("train bags differ in embedding width")

    init_rng = np.random.default_rng([config.seed, 0])
    order_rng = np.random.default_rng([config.seed, 1])
    push_rng = np.random.default_rng([config.seed, 2])
    model = SlideGCDModel.create(config, patch_dim, init_rng)
    labels_all = np.array([b.label for b in bags], dtype=np.int64)
    steps_per_epoch = math.ceil(len(bags) / config.batch_size)
    state = OptimState()
    records: list[dict] = []

    mil_params = model.mil_parameters()
    all_params = model.parameters()

    def epoch_record(epoch, stage, rows, lr, extra=None):
        rec = {"record": "epoch", "epoch": epoch, "stage": stage, "lr": lr}
        for key in ("l_ce_mil", "l_ce_graph", "l_kd", "l_update", "total"):
            rec[key] = float(np.mean([r[key] for r in rows]))
        rec.update(extra or {})
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d %s total=%.4f lr=%.2e", epoch, stage, rec["total"], lr)

    global_step = 0
    for epoch in range(1, config.warmup_epochs + 1):
        rows = []
        for idx in _batches(len(bags), config.batch_size, order_rng):
            batch = [bags[i] for i in idx]
            y = labels_all[idx]
            nx.zero_grads(all_params.values())
            with GradTape() as tape:
                S = model.embed(batch)
                l_ce = cross_entropy(mil_head(S, model.head), y)
                loss = total_loss(l_ce, 0.0, 0.0, 0.0, config.beta, config.strategy)
            tape.backward(loss.tensor)
            _step(mil_params, state, loss, config.lr_warmup)
            warmup_push(model.buffer, S.data, y, push_rng)
            global_step += 1
            row = {"record": "step", "step": global_step, "epoch": epoch, "stage": "warmup",
                   "lr": config.lr_warmup, **loss.as_dict()}
            records.append(row)
            rows.append(row)
        epoch_record(epoch, "warmup", rows, config.lr_warmup)
    if not model.buffer.is_full:
        raise StateError(f"warmup left the buffer at {model.buffer.sizes()} of {model.buffer.per_class} "
                         "per class; use more warmup epochs or a smaller buffer")

    formal_steps = (config.total_epochs - config.warmup_epochs) * steps_per_epoch
    formal_step = 0
    for epoch in range(config.warmup_epochs + 1, config.total_epochs + 1):
        rows = []
        accepted = 0
        seen = 0
        for idx in _batches(len(bags), config.batch_size, order_rng):
            batch = [bags[i] for i in idx]
            y = labels_all[idx]
            lr = nx.cosine_anneal_lr(formal_step, formal_steps, config.lr_formal, config.lr_min)
            nx.zero_grads(all_params.values())
            with GradTape() as tape:
                S = model.embed(batch)
                mil_logits = mil_head(S, model.head)
                centers = compute_centers(model.buffer, config.tau)
                l_update = buffer_update_loss(S, y, centers, config.tau)
                X0, _, mask = snapshot_nodes(model.buffer, S, y)
                _, act, final = model.graph_forward(X0, mask, S, mil_logits)
                loss = _losses(config, y, mil_logits, act.logits, final, l_update)
            flags = formal_update(model.buffer, S.data, y, centers)
            accepted += int(flags.sum())
            seen += len(flags)
            tape.backward(loss.tensor)
            _step(all_params, state, loss, lr)
            formal_step += 1
            global_step += 1
            row = {"record": "step", "step": global_step, "epoch": epoch, "stage": "formal", "lr": lr,
                   **loss.as_dict()}
            records.append(row)
            rows.append(row)
        epoch_record(epoch, "formal", rows, rows[-1]["lr"], {"accept_rate": accepted / max(seen, 1)})
    return TrainResult(model, records)


def _losses(config: TrainConfig, y, mil_logits: Tensor, graph_logits: Tensor, final: Tensor,
            l_update: Tensor) -> LossBreakdown:
    l_ce_mil = cross_entropy(mil_logits, y)
    if config.strategy in DISTILL:
        l_ce_graph = cross_entropy(graph_logits, y)
        if config.strategy == "distill-js":
            l_kd = kd_js(graph_logits, mil_logits, config.kd_temperature)
        else:
            l_kd = kd_kl(graph_logits, mil_logits, config.kd_temperature)
    else:
        l_ce_graph = cross_entropy(final, y)
        l_kd = 0.0
    out = total_loss(l_ce_mil, l_ce_graph, l_kd, l_update, config.beta, config.strategy)
    out.p_graph = softened(graph_logits, config.kd_temperature)
    out.p_mil = softened(mil_logits, config.kd_temperature)
    return out


# ----------------------------------------------------------------------------
# inference


@dataclass
class Neighbor:
    node: int
    source: str  # "buffer" or "batch"
    label: int | None
    distance: float


@dataclass
class Prediction:
    predicted: int
    probs: np.ndarray
    graph_probs: np.ndarray
    mil_probs: np.ndarray
    neighbors: list[Neighbor]


def infer(model: SlideGCDModel, bag, conv: str | None = None) -> Prediction:
    """Predict one slide against the frozen buffer. Nothing in ``model`` is modified."""
    if conv is not None and conv != model.config.conv:
        raise ConfigError(f"model was trained with conv={model.config.conv!r}; "
                          f"refusing to run inference with conv={conv!r}")
    patches = bag.embeddings if isinstance(bag, PatchBag) else np.asarray(bag)
    if patches.ndim != 2 or patches.shape[1] != model.patch_dim:
        raise InputError(f"bag of shape {patches.shape} does not match model input width {model.patch_dim}")
    S = model.embed([patches])
    mil_logits = mil_head(S, model.head)
    X0, node_labels, mask = snapshot_nodes(model.buffer, S, np.zeros(1, dtype=np.int64))
    graph, act, final = model.graph_forward(X0, mask, S, mil_logits)
    q = graph.num_nodes - 1
    neighbors = []
    for v in graph.edges[q][1:]:
        v = int(v)
        d = float(np.sqrt(((graph.P[v] - graph.P[q]) ** 2).sum()))
        neighbors.append(Neighbor(v, "buffer", int(node_labels[v]), d))
    probs = nx.softmax(final, axis=1).data[0].astype(np.float64)
    return Prediction(int(np.argmax(probs)), probs,
                      nx.softmax(act.logits, axis=1).data[0].astype(np.float64),
                      nx.softmax(mil_logits, axis=1).data[0].astype(np.float64),
                      neighbors)


@dataclass
class EvalReport:
    combined: Metrics
    graph: Metrics
    mil: Metrics
    predictions: list[Prediction] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        out = self.combined.to_json()
        out["branches"] = {"graph": self.graph.to_json(), "mil": self.mil.to_json()}
        return out


def evaluate(model: SlideGCDModel, bags: Sequence[PatchBag]) -> EvalReport:
    """Per-slide inference, then metrics for the combined output and each branch."""
    if not bags:
        raise InputError("cannot evaluate an empty split")
    preds = [infer(model, b) for b in bags]
    y = np.array([b.label for b in bags])
    C = model.config.num_classes
    return EvalReport(
        compute_metrics(y, np.stack([p.probs for p in preds]), C),
        compute_metrics(y, np.stack([p.graph_probs for p in preds]), C),
        compute_metrics(y, np.stack([p.mil_probs for p in preds]), C),
        preds,
    )

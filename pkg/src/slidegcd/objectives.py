"""Task losses, branch interaction strategies and the composite objective.

Strategies
----------
``distill-js``  graph branch predicts; symmetric JS coupling, gradients reach both branches.
``distill-kl``  graph branch predicts; ``t**2 * KL(p_mil || p_graph)`` with the MIL side detached.
``logits-add``  prediction is ``graph_logits + mil_logits``.
``feat-cat``    linear layer over ``[s || h']``.
``feat-add``    linear layer over ``proj_g(h') + proj_m(s)``.

For the fusion strategies the fused logits take the place of the graph logits
in the graph CE slot and the distillation term is zero.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, InputError, ParameterError, TrainingError
from .numerics import Tensor

STRATEGIES = ("distill-js", "distill-kl", "logits-add", "feat-cat", "feat-add")
DISTILL = ("distill-js", "distill-kl")

LN2 = math.log(2.0)


def cross_entropy(logits, y) -> Tensor:
    """Mean ``-log softmax(logits)[y]`` over the batch; an empty batch gives 0 and a warning."""
    logits = nx.as_tensor(logits)
    y = np.asarray(y, dtype=np.int64).ravel()
    if logits.data.ndim == 1:
        logits = nx.reshape(logits, (1, -1))
    n, c = logits.shape
    if n == 0:
        warnings.warn("cross_entropy on an empty batch; returning 0", RuntimeWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=logits.dtype))
    if len(y) != n:
        raise DimensionError(f"{n} logit rows but {len(y)} labels")
    if y.min() < 0 or y.max() >= c:
        raise InputError(f"labels must lie in [0, {c})")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), y] = 1.0
    return nx.mul(nx.sum_(nx.mul(nx.log_softmax(logits, axis=1), onehot)), -1.0 / n)


def _check_pair(a: Tensor, b: Tensor, t: float) -> None:
    if not t > 0:
        raise ParameterError(f"distillation temperature must be positive, got {t}")
    if a.shape != b.shape:
        raise DimensionError(f"logit shapes differ: {a.shape} vs {b.shape}")


def _rows(x) -> Tensor:
    x = nx.as_tensor(x)
    return nx.reshape(x, (1, -1)) if x.data.ndim == 1 else x


def kd_js(graph_logits, mil_logits, t: float = 1.5) -> Tensor:
    """Jensen-Shannon style coupling of the two temperature-softened distributions.

    ``sum p log(2p / (p + q)) + sum q log(2q / (p + q))`` averaged over rows;
    symmetric and bounded by ``2 ln 2``.
    """
    a, b = _rows(graph_logits), _rows(mil_logits)
    _check_pair(a, b, t)
    if a.shape[0] == 0:
        return Tensor(np.zeros((), dtype=a.dtype))
    logp = nx.log_softmax(nx.mul(a, 1.0 / t), axis=1)
    logq = nx.log_softmax(nx.mul(b, 1.0 / t), axis=1)
    # log((p + q) / 2) from log-probabilities keeps 0 * log 0 terms finite
    logm = nx.sub(nx.logaddexp(logp, logq), LN2)
    kl_p = nx.sum_(nx.mul(nx.exp(logp), nx.sub(logp, logm)))
    kl_q = nx.sum_(nx.mul(nx.exp(logq), nx.sub(logq, logm)))
    return nx.mul(nx.add(kl_p, kl_q), 1.0 / a.shape[0])


def kd_kl(student_logits, teacher_logits, t: float = 1.5) -> Tensor:
    """``t**2 * KL(p_teacher || p_student)``, mean over rows; the teacher gets no gradient."""
    s, tch = _rows(student_logits), _rows(teacher_logits)
    _check_pair(s, tch, t)
    if s.shape[0] == 0:
        return Tensor(np.zeros((), dtype=s.dtype))
    logq = nx.log_softmax(nx.mul(nx.stop_gradient(tch), 1.0 / t), axis=1)
    logp = nx.log_softmax(nx.mul(s, 1.0 / t), axis=1)
    q = np.exp(logq.data)
    kl = nx.sum_(nx.mul(nx.sub(logq, logp), q))
    return nx.mul(kl, t * t / s.shape[0])


# ----------------------------------------------------------------------------
# fusion


@dataclass
class FusionParams:
    """Extra weights owned by the feature-fusion strategies (empty otherwise)."""

    tensors_: dict[str, Tensor] = field(default_factory=dict)

    def tensors(self) -> dict[str, Tensor]:
        return self.tensors_

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors_[key]


def init_fusion_params(strategy: str, d_s: int, num_classes: int, rng: np.random.Generator,
                       dtype=np.float32) -> FusionParams:
    check_strategy(strategy)
    h = 3 * d_s

    def p(shape, fan_in):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    if strategy == "feat-cat":
        return FusionParams({"W": p((d_s + h, num_classes), d_s + h), "b": zeros(num_classes)})
    if strategy == "feat-add":
        return FusionParams({
            "proj_g_W": p((h, d_s), h), "proj_g_b": zeros(d_s),
            "proj_m_W": p((d_s, d_s), d_s), "proj_m_b": zeros(d_s),
            "W": p((d_s, num_classes), d_s), "b": zeros(num_classes),
        })
    return FusionParams()


def check_strategy(strategy: str) -> None:
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown interaction strategy {strategy!r}; expected one of {STRATEGIES}")


def fuse(strategy: str, graph_logits, mil_logits, s=None, h_batch=None,
         params: FusionParams | None = None) -> Tensor:
    """Final logits of the combined model for the batch rows.

    ``s`` are the batch slide embeddings and ``h_batch`` the batch rows of the
    centred hop features; only the feature-fusion strategies use them.
    """
    check_strategy(strategy)
    if strategy in DISTILL:
        return nx.as_tensor(graph_logits)
    if strategy == "logits-add":
        g, m = nx.as_tensor(graph_logits), nx.as_tensor(mil_logits)
        if g.shape != m.shape:
            raise ConfigError(f"logits-add needs equal logit shapes, got {g.shape} and {m.shape}")
        return nx.add(g, m)
    if s is None or h_batch is None or params is None or not params.tensors():
        raise ConfigError(f"{strategy} needs slide embeddings, hop features and fusion weights")
    s, h_batch = nx.as_tensor(s), nx.as_tensor(h_batch)
    if s.shape[0] != h_batch.shape[0]:
        raise ConfigError(f"{strategy}: {s.shape[0]} embeddings vs {h_batch.shape[0]} graph rows")
    try:
        if strategy == "feat-cat":
            return nx.linear_forward(nx.concat([s, h_batch], axis=1), params["W"], params["b"])
        g = nx.linear_forward(h_batch, params["proj_g_W"], params["proj_g_b"])
        m = nx.linear_forward(s, params["proj_m_W"], params["proj_m_b"])
        return nx.linear_forward(nx.add(g, m), params["W"], params["b"])
    except DimensionError as exc:
        raise ConfigError(f"{strategy}: {exc}") from exc


# ----------------------------------------------------------------------------
# composition


@dataclass
class LossBreakdown:
    l_ce_mil: float
    l_ce_graph: float
    l_kd: float
    l_update: float
    beta: float
    total: float
    p_graph: np.ndarray | None = None
    p_mil: np.ndarray | None = None
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {"l_ce_mil": self.l_ce_mil, "l_ce_graph": self.l_ce_graph, "l_kd": self.l_kd,
                "l_update": self.l_update, "total": self.total}


def total_loss(l_ce_mil, l_ce_graph, l_kd, l_update, beta: float,
               strategy: str = "distill-js") -> LossBreakdown:
    """``l_ce_mil + l_ce_graph + l_kd + beta * l_update``.

    Parts may be tensors (the returned breakdown then carries the summed tensor
    for backpropagation) or plain numbers. Fusion strategies drop ``l_kd``.
    """
    check_strategy(strategy)
    parts = {"l_ce_mil": l_ce_mil, "l_ce_graph": l_ce_graph, "l_kd": l_kd, "l_update": l_update}
    if strategy not in DISTILL:
        parts["l_kd"] = 0.0
    values = {k: float(nx.as_tensor(v).data) for k, v in parts.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise TrainingError("non-finite loss component(s): "
                            + ", ".join(f"{k}={values[k]}" for k in bad))
    tensors = [v for v in parts.values() if isinstance(v, Tensor)]
    tensor = None
    if tensors:
        upd = parts["l_update"]
        tensor = nx.add(nx.add(parts["l_ce_mil"], parts["l_ce_graph"]),
                        nx.add(parts["l_kd"], nx.mul(upd, beta) if isinstance(upd, Tensor) else beta * upd))
    total = values["l_ce_mil"] + values["l_ce_graph"] + values["l_kd"] + beta * values["l_update"]
    return LossBreakdown(values["l_ce_mil"], values["l_ce_graph"], values["l_kd"], values["l_update"],
                         beta, total, tensor=tensor)


def softened(logits, t: float) -> np.ndarray:
    return nx.softmax_with_temperature(nx.stop_gradient(_rows(logits)), t, axis=1).data

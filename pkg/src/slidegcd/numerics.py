"""Dense tensor arithmetic with a reverse-mode gradient tape, Adam and cosine annealing.

Only the operations the model needs are provided. Every op accepts either a
:class:`Tensor` or anything :func:`numpy.asarray` understands; constants never
receive gradients.

Usage::

    W = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    with GradTape() as tape:
        loss = mean(linear_forward(x, W, b))
    tape.backward(loss)
    W.grad
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, InputError, OracleError, ParameterError, TrainingError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "slidegcd_active_tape", default=None
)


class Tensor:
    """A numpy array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records differentiable ops while active; replays them backwards.

    One tape per training step. Leaf tensors with ``requires_grad`` receive
    additive gradient accumulation in ``.grad``.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.ops.append((out, inputs, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        if loss.is_leaf:
            if loss.requires_grad:
                _accumulate(loss, seed)
            return
        pending: dict[int, np.ndarray] = {id(loss): seed}
        for out, inputs, fn in reversed(self.ops):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    _accumulate(t, gi)
                else:
                    key = id(t)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.is_leaf = False
        tape.record(out, inputs, backward)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain constants adopt the tensor operand's dtype so float32 stays float32
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise / linear algebra


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def linear_forward(x, W, b=None) -> Tensor:
    """Affine map ``x @ W + b`` for ``x`` of shape (n, d) and ``W`` of shape (d, m)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not conform to weight {W.shape}")
    out = x.data @ W.data
    if b is None:
        return _make(out, (x, W), lambda g: (g @ W.data.T, x.data.T @ g))
    b = as_tensor(b)
    if b.data.reshape(-1).shape[0] != W.shape[1]:
        raise DimensionError(f"linear: bias {b.shape} does not conform to weight {W.shape}")
    out = out + b.data.reshape(1, -1)
    return _make(out, (x, W, b),
                 lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0).reshape(b.shape)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign: exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype, copy=False)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# ----------------------------------------------------------------------------
# reductions / structure


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    other = [i for i in range(ts[0].data.ndim) if i != axis]
    for t in ts[1:]:
        if t.data.ndim != ts[0].data.ndim or any(t.shape[i] != ts[0].shape[i] for i in other):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in ts]} do not conform")
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ----------------------------------------------------------------------------
# probability


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def logaddexp(a, b) -> Tensor:
    a, b = _pair(a, b)
    y = np.logaddexp(a.data, b.data)
    return _make(y, (a, b), lambda g: (_unbroadcast(g * np.exp(a.data - y), a.shape),
                                       _unbroadcast(g * np.exp(b.data - y), b.shape)))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def softmax_with_temperature(z, t: float, axis: int = -1) -> Tensor:
    """Softmax of ``z / t``; accepts a vector or a batch of rows."""
    if not t > 0:
        raise ParameterError(f"temperature must be positive, got {t}")
    return softmax(mul(z, 1.0 / t), axis=axis)


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise InputError("cannot normalise a zero-norm vector")
    y = a.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (a,), backward)


# ----------------------------------------------------------------------------
# optimisation


@dataclass
class OptimState:
    """Adam moment estimates keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
              state: OptimState, lr: float) -> OptimState:
    """One in-place Adam update. Parameters whose gradient is ``None`` are skipped."""
    if lr < 0:
        raise ParameterError(f"learning rate must be non-negative, got {lr}")
    bad = [name for name, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient at step {state.step + 1} in: {', '.join(sorted(bad))}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        dt = p.data.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g).astype(dt, copy=False)
        v = (ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g).astype(dt, copy=False)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data = (p.data - update).astype(dt, copy=False)
    return state


def cosine_anneal_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr_max`` at step 0 down to ``lr_min`` at ``total_steps``."""
    if total_steps < 1:
        raise ParameterError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    if not lr_max >= lr_min >= 0:
        raise ParameterError(f"need lr_max >= lr_min >= 0, got {lr_max}, {lr_min}")
    if step >= total_steps:
        return float(lr_min)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ----------------------------------------------------------------------------
# finite-difference oracle


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               atol: float = 1e-8) -> float:
    """Max elementwise relative error between tape and central-difference gradients.

    ``fn(*inputs)`` must return a scalar tensor. Inputs are cast to float64 in
    place; those with ``requires_grad`` are checked. The relative error of an
    element is ``|a - n| / max(|a|, |n|, atol)``.
    """
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    for t in inputs:
        t.data = np.asarray(t.data, dtype=np.float64)
        t.grad = None
    with GradTape() as tape:
        out = fn(*inputs)
    tape.backward(out)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*inputs).data)
            flat[i] = orig - eps
            fm = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            if not math.isfinite(numeric):
                name = t.name or "input"
                raise OracleError(f"non-finite difference quotient for {name}[{i}]")
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            worst = max(worst, err)
    return worst


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op builds its output through :func:`_record`, which links
the output to its operands and stores a closure that pushes the output
gradient back into them. :func:`backward` orders the reachable graph
topologically (the computation record) and runs those closures in reverse.

Only the shapes the transformer needs are supported: same-shape elementwise
ops, a bias add over the last axis, 2-D / batched matmul, and reductions along
one axis. There is no general broadcasting.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import erf

from xlchain.errors import DimensionError, NumericError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __sub__(self, other: Tensor) -> Tensor:
        return add(self, scale(other, -1.0))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self) -> Tensor:
        return sum_all(self)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def computation_record(root: Tensor) -> list[Tensor]:
    """Return every tensor reachable from ``root`` in topological order.

    Operands always precede the tensors computed from them.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    record = computation_record(loss)
    for node in record:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(record):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return record


# -- elementwise -----------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _record(a.data + b.data, (a, b), _bw, "add")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1-D ``bias`` along the last axis of ``x``."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match last axis of {x.shape}")

    def _bw(g):
        _accumulate(x, g)
        _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _record(x.data + bias.data, (x, bias), _bw, "add_bias")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def _bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _record(a.data * b.data, (a, b), _bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    def _bw(g):
        _accumulate(x, g * c)

    return _record(x.data * c, (x,), _bw, "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / np.sqrt(2.0 * np.pi)

    def _bw(g):
        _accumulate(x, g * (cdf + x.data * pdf))

    return _record(x.data * cdf, (x,), _bw, "gelu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def _bw(g):
        _accumulate(x, g * keep)

    return _record(x.data * keep, (x,), _bw, "dropout")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (no gradient there)."""
    mask = np.broadcast_to(mask, x.shape)

    def _bw(g):
        _accumulate(x, np.where(mask, 0.0, g))

    return _record(np.where(mask, value, x.data), (x,), _bw, "masked_fill")


# -- shape -----------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def _bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _record(x.data.reshape(shape), (x,), _bw, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def _bw(g):
        _accumulate(x, g.transpose(inverse))

    return _record(x.data.transpose(axes), (x,), _bw, "transpose")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate grads."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        _accumulate(x, full)

    return _record(np.take(x.data, indices, axis=axis), (x,), _bw, "take")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")

    def _bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accumulate(weight, full)

    return _record(weight.data[ids], (weight,), _bw, "embedding")


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands, N-D @ 2-D, or equal-batch N-D @ N-D."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim == 2:
        k, n = b.shape

        def _bw(g):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))

    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:

        def _bw(g):
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    else:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record(a.data @ b.data, (a, b), _bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add_bias(matmul(x, weight), bias)


# -- reductions and normalisation -----------------------------------------


def sum_all(x: Tensor) -> Tensor:
    def _bw(g):
        _accumulate(x, np.full(x.shape, float(g)))

    return _record(np.array(x.data.sum()), (x,), _bw, "sum")


def _check_finite(values: np.ndarray, op: str) -> None:
    if np.isnan(values).any():
        raise NumericError(f"{op}: NaN in input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _record(y, (x,), _bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs extent {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = np.where(var + eps > 0, centered * rstd, 0.0)

    def _bw(g):
        _accumulate(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        _accumulate(beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            ) * (rstd / n)
            _accumulate(x, dx)

    return _record(xhat * gamma.data + beta.data, (x, gamma, beta), _bw, "layer_norm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax of ``logits``."""
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    batch, k = logits.shape
    if batch == 0:
        raise DimensionError("cross_entropy: empty batch")
    if targets.min() < 0 or targets.max() >= k:
        raise IndexError(f"cross_entropy: target outside [0, {k})")
    _check_finite(logits.data, "cross_entropy")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    loss = (logsumexp - shifted[rows, targets]).mean()

    def _bw(g):
        probs = np.exp(shifted - logsumexp[:, None])
        probs[rows, targets] -= 1.0
        _accumulate(logits, probs * (float(g) / batch))

    return _record(np.array(loss), (logits,), _bw, "cross_entropy")


# -- optimiser -------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    A missing gradient counts as zero, so untouched parameters still advance
    their moment estimates consistently.
    """
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"adam_step: grad {g.shape} vs param {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def gradients(params: Mapping[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {name: p.grad for name, p in params.items()}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

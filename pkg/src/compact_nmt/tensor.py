"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents
and a closure propagating the output gradient back into them.  The graph is
only recorded when at least one input requires a gradient, so inference
runs pay nothing for it.

Only what the translation model and its training loops need is provided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DimensionError, NumericError, StateError

__all__ = [
    "Tensor",
    "RandomSource",
    "AdamMoments",
    "Adam",
    "add",
    "mul",
    "matmul",
    "linear",
    "relu",
    "reshape",
    "transpose",
    "softmax",
    "layer_norm",
    "dropout",
    "embedding",
    "cross_entropy_label_smoothed",
    "sgd_step",
    "adam_step",
    "finite_difference_check",
    "glorot_uniform",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat copy of the data."""
        return self.data.ravel().copy()

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every leaf in the graph."""
        if not self.requires_grad:
            raise StateError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("implicit gradient only for scalar outputs")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate buffers are no longer needed
                if node._parents:
                    node.grad = None

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other), _lift(-1.0)))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, _lift(-1.0)))

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, _lift(1.0 / other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> Tensor:
        x = self

        def backward(g):
            _accumulate(x, np.broadcast_to(g, x.shape))

        return _result(np.asarray(self.data.sum()), (x,), backward)

    def mean(self) -> Tensor:
        return self.sum() / self.data.size


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and shape operations


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward(g):
        _accumulate(x, g * positive)

    return _result(np.where(positive, x.data, 0.0), (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), backward)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` applied to the last axis of ``x``."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"cannot apply {weight.shape} weight to {x.shape} input")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            _accumulate(weight, x2.T @ g2)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))

    return _result(out.reshape(*lead, weight.shape[1]), parents, backward)


# --------------------------------------------------------------------------
# normalisation and probability


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is added before normalisation; use ``-inf`` for positions that
    must receive exactly zero weight.
    """
    if x.data.size == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax of an empty row")
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer norm parameters {gain.shape}/{bias.shape} for width {width}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    normed = centred * inv_std

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * normed).reshape(-1, width).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, width).sum(axis=0))
        if x.requires_grad:
            gn = g * gain.data
            gx = inv_std * (
                gn
                - gn.mean(axis=-1, keepdims=True)
                - normed * (gn * normed).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, gx)

    return _result(normed * gain.data + bias.data, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: "RandomSource | None", train: bool) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise StateError("dropout at train time needs a RandomSource")
    keep = rng.generator.random(x.shape) >= rate
    scale = keep / (1.0 - rate)

    def backward(g):
        _accumulate(x, g * scale)

    return _result(x.data * scale, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table``; gradients are scattered back to those rows only."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[1]))
            _accumulate(table, full)

    return _result(table.data[ids], (table,), backward)


def cross_entropy_label_smoothed(
    logits: Tensor,
    target,
    eps_ls: float = 0.0,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Mean cross-entropy against the label-smoothed target distribution.

    The smoothed distribution puts ``1 - eps_ls`` on the target and spreads
    ``eps_ls`` uniformly over all classes.  ``logits`` may be a single row
    with an integer target, or ``(..., V)`` with an integer array of targets;
    ``weights`` (0/1 per position) exclude padding from the mean.
    """
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError(f"eps_ls must lie in [0, 1), got {eps_ls}")
    vocab = logits.shape[-1]
    target = np.asarray(target, dtype=np.int64)
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {target.shape} for logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    z = logits.data.reshape(-1, vocab)
    t = target.ravel()
    w = np.ones(t.shape) if weights is None else np.asarray(weights, float).ravel()
    count = w.sum()
    if count <= 0:
        raise DimensionError("no positions to average over")

    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - log_norm
    rows = np.arange(len(t))
    nll = -logp[rows, t]
    smooth = -logp.mean(axis=-1)
    per_position = (1.0 - eps_ls) * nll + eps_ls * smooth
    loss = float((per_position * w).sum() / count)

    def backward(g):
        q = np.full_like(z, eps_ls / vocab)
        q[rows, t] += 1.0 - eps_ls
        grad = (np.exp(logp) - q) * (w / count)[:, None]
        _accumulate(logits, (g * grad).reshape(logits.shape))

    return _result(np.asarray(loss), (logits,), backward)


# --------------------------------------------------------------------------
# randomness and initialisation


class RandomSource:
    """Seeded generator; identical seeds give identical draw sequences."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)


def glorot_uniform(shape: tuple[int, int], rng: RandomSource) -> np.ndarray:
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, shape)


# --------------------------------------------------------------------------
# optimisers


def sgd_step(param: Tensor, lr: float) -> Tensor:
    if param.grad is None:
        raise StateError("sgd_step on a parameter without a gradient")
    param.data -= lr * param.grad
    param.grad = None
    return param


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: Tensor) -> "AdamMoments":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data))


def adam_step(
    param: Tensor,
    moments: AdamMoments,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tensor:
    if moments.m.shape != param.shape or moments.v.shape != param.shape:
        raise DimensionError(f"moments {moments.m.shape} for parameter {param.shape}")
    if param.grad is None:
        raise StateError("adam_step on a parameter without a gradient")
    g = param.grad
    moments.t += 1
    moments.m = beta1 * moments.m + (1.0 - beta1) * g
    moments.v = beta2 * moments.v + (1.0 - beta2) * g * g
    m_hat = moments.m / (1.0 - beta1**moments.t)
    v_hat = moments.v / (1.0 - beta2**moments.t)
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    param.grad = None
    return param


@dataclass
class Adam:
    """Adam over a named collection of parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    moments: dict[str, AdamMoments] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], lr: float | None = None) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            if name not in self.moments:
                self.moments[name] = AdamMoments.zeros_like(p)
            adam_step(p, self.moments[name], self.lr if lr is None else lr,
                      self.beta1, self.beta2, self.eps)


# --------------------------------------------------------------------------
# verification


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
    names: Iterable[str] | None = None,
) -> float:
    """Largest relative disagreement between analytic and numeric gradients.

    For every entry the error is ``|a - n| / (|a| + |n| + floor)`` with ``n``
    the central difference of step ``h``.  ``floor`` keeps entries whose true
    gradient is zero from being judged on round-off alone.
    """
    if not h > 0:
        raise NumericError(f"finite-difference step must be positive, got {h}")
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is not finite at the evaluation point")
    loss.backward()

    def value() -> float:
        v = float(f(params).data)
        if not math.isfinite(v):
            raise NumericError("objective became non-finite during probing")
        return v

    worst = 0.0
    for name in params if names is None else names:
        p = params[name]
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = value()
            flat[i] = saved - h
            down = value()
            flat[i] = saved
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + floor)
            worst = max(worst, err)
    for p in params.values():
        p.grad = None
    return worst

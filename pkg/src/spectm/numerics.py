"""Dense float64 tensor core with reverse-mode gradients, AdamW, the
cosine-warmup schedule, and a finite-difference gradient checker.

The tape is rebuilt on every forward pass. backward() accumulates into
Parameter.grad buffers and leaves interior-node gradients on the local
traversal, so calling backward twice on two losses sums their parameter
gradients; call zero_grads between steps to reset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph. data is a contiguous float64 array."""

    __slots__ = ("data", "parents", "vjp", "requires_grad", "grad", "name", "trainable")

    def __init__(self, data, parents=(), vjp=None, requires_grad=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.parents = tuple(parents)
        self.vjp = vjp  # maps upstream grad -> tuple of parent grads
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.name = None
        self.trainable = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    # -- graph traversal ----------------------------------------------------

    def _topo(self) -> list["Tensor"]:
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(param) into every reachable Parameter's .grad."""
        if self.size != 1:
            raise NumericError(f"backward requires a scalar loss, got shape {self.shape}")
        grads: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf. .grad persists across backward calls until zero_grads."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.trainable = True
        self.grad = np.zeros_like(self.data)


def zero_grads(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return Tensor(out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return Tensor(out, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.data.reshape(shape), (a,),
                  lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)
    return Tensor(np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing; backward scatters into a zero buffer."""
    a = _as_tensor(a)
    out = a.data[index]

    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        return (buf,)

    return Tensor(out, (a,), vjp)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
    return Tensor(a.data * cdf, (a,),
                  lambda g: (g * (cdf + a.data * pdf),))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    if a.data.ndim == 0 or a.data.shape[-1] == 0:
        raise NumericError("softmax needs a non-empty last axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, (a,), vjp)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    n = a.data.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gy = g * gamma.data
        # d/dx of (x - mu) * inv with mu, inv both functions of x
        dx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgamma = _unbroadcast((g * xhat).sum(axis=axes), gamma.shape)
        dbeta = _unbroadcast(g.sum(axis=axes), beta.shape)
        return dx, dgamma, dbeta

    del n
    return Tensor(xhat * gamma.data + beta.data, (a, gamma, beta), vjp)


def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Bernoulli zeroing with 1/(1-p) scaling in training mode; identity otherwise."""
    a = _as_tensor(a)
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ConfigError("training-mode dropout requires an rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return Tensor(a.data * keep, (a,), lambda g: (g * keep,))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.data.shape[axis] if isinstance(axis, int) else int(
            np.prod([a.data.shape[ax] for ax in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return mul(a, a)


def mean_square(a) -> Tensor:
    return mean(square(a))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, Array]
    v: dict[str, Array]
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls(m={p.name: np.zeros_like(p.data) for p in params},
                   v={p.name: np.zeros_like(p.data) for p in params})


def adamw_step(params, state: OptimizerState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One AdamW update with decoupled decay:
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)."""
    params = [p for p in params if p.trainable]
    for p in params:
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p in params:
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * (p.grad * p.grad)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    total_epochs: int
    warmup_epochs: int = 5
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.min_lr <= self.peak_lr:
            raise ConfigError("require 0 <= min_lr <= peak_lr")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("require 0 <= warmup_epochs <= total_epochs")


def cosine_warmup_lr(epoch: int, sched: LrSchedule) -> float:
    """Linear ramp to peak over the warmup epochs, then cosine decay to min_lr
    that lands exactly on min_lr at the final epoch."""
    if not 0 <= epoch < sched.total_epochs:
        raise ConfigError(f"epoch {epoch} outside 0..{sched.total_epochs - 1}")
    if epoch < sched.warmup_epochs:
        return sched.peak_lr * (epoch + 1) / sched.warmup_epochs
    span = sched.total_epochs - sched.warmup_epochs
    phase = math.pi * (epoch - sched.warmup_epochs + 1) / span
    return sched.min_lr + 0.5 * (sched.peak_lr - sched.min_lr) * (1.0 + math.cos(phase))


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(fn, params, step: float = 1e-5, max_coords: int = 256,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() and central finite differences.

    fn must be a deterministic closure over `params` returning a scalar
    Tensor (run dropout in eval mode). For parameters larger than max_coords
    a seeded coordinate subsample is checked.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    zero_grads(params)
    loss = fn()
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        ana_flat = analytic[p.name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = fn().data.item()
            flat[c] = orig - step
            f_minus = fn().data.item()
            flat[c] = orig
            num = (f_plus - f_minus) / (2.0 * step)
            ana = float(ana_flat[c])
            err = abs(num - ana) / (abs(num) + abs(ana) + 1e-12)
            if err > worst:
                worst = err
    zero_grads(params)
    return worst

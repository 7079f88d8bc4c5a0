"""Dense tensors with define-by-run reverse-mode differentiation, plus Adam.

Operations executed while a :class:`Tape` is active are recorded together
with a vector-Jacobian closure; :func:`backward` replays them in reverse.
Outside a tape every op is a plain numpy computation.

    >>> w = parameter(np.ones((2, 2)))
    >>> with Tape() as tape:
    ...     loss = sum_all(matmul(w, w))
    >>> backward(tape, loss, {"w": w})["w"]
    array([[4., 4.],
           [4., 4.]])
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError, DegenerateError, DimensionError, UsageError


class Tensor:
    """Immutable dense array node. ``requires_grad`` marks leaves and recorded outputs."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)


def tensor(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE: list["Tape"] = []


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed operations; use as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def _record(out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    result = Tensor(out)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        _ACTIVE[-1].records.append(_Record(result, tuple(inputs), vjp))
    return result


def backward(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Return gradients of scalar ``loss``.

    With a name->Tensor mapping the result is keyed by name; with an iterable
    of tensors it is keyed by tensor. Unreachable tensors get zero gradients.
    With ``wrt=None`` every reached leaf is returned, keyed by tensor.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(id(rec.output))
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    if wrt is None:
        leaves = {}
        for rec in tape.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced and id(t) in grads:
                    leaves[t] = grads[id(t)]
        return leaves
    if isinstance(wrt, Mapping):
        return {k: grads.get(id(t), np.zeros_like(t.data)) for k, t in wrt.items()}
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast as in numpy."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # fold the batch axes into one GEMM instead of summing B products
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def activation(x, kind: str) -> Tensor:
    x = _as_tensor(x)
    if kind == "relu":
        pos = x.data > 0
        out = np.where(pos, x.data, 0.0).astype(x.dtype, copy=False)
        return _record(out, (x,), lambda g: (g * pos,))
    if kind == "tanh":
        out = np.tanh(x.data)
        return _record(out, (x,), lambda g: (g * (1.0 - out * out),))
    raise ConfigError(f"unknown activation {kind!r}")


def relu(x) -> Tensor:
    return activation(x, "relu")


def tanh(x) -> Tensor:
    return activation(x, "tanh")


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inv = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x, key) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, Ellipsis."""
    x = _as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _record(x.data[key], (x,), vjp)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of an empty list")
    nd = parts[0].ndim
    ax = axis % nd
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat side extents disagree: {[q.shape for q in parts]} along axis {axis}"
            )
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=ax)
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return _record(out, parts, lambda g: tuple(np.split(g, splits, axis=ax)))


# ---------------------------------------------------------------------------
# Network ops
# ---------------------------------------------------------------------------


def masked_softmax(x, mask, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to ``mask``; masked outputs are exactly 0."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} differs from input {x.shape}")
    if not mask.any(axis=axis).all():
        raise DegenerateError("masked_softmax: a slice has no unmasked entries")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), vjp)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1


def batch_norm(
    x,
    node_mask,
    gamma,
    beta,
    running: RunningStats,
    training: bool,
    eps: float = 1e-5,
) -> Tensor:
    """Per-feature normalization of ``x[B, N, F]`` over valid (batch, node) positions.

    Padded positions come out as zeros. In training mode the running statistics
    are updated in place (unbiased variance, as is customary).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    m = np.asarray(node_mask, dtype=bool)
    if x.ndim != 3 or m.shape != x.shape[:2]:
        raise DimensionError(f"batch_norm expects x[B,N,F] and mask[B,N], got {x.shape}, {m.shape}")
    w = m[..., None].astype(x.dtype)
    count = int(m.sum())
    if count == 0:
        raise DegenerateError("batch_norm: no valid positions in batch")

    if training:
        mean = (x.data * w).sum(axis=(0, 1)) / count
        centered = (x.data - mean) * w
        var = (centered * centered).sum(axis=(0, 1)) / count
        mom = running.momentum
        unbiased = var * count / (count - 1) if count > 1 else var
        running.mean[...] = (1 - mom) * running.mean + mom * mean
        running.var[...] = (1 - mom) * running.var + mom * unbiased
    else:
        mean, var = running.mean, running.var
        centered = (x.data - mean) * w

    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = (xhat * gamma.data + beta.data) * w

    def vjp(g):
        g = g * w
        ggamma = (g * xhat).sum(axis=(0, 1))
        gbeta = g.sum(axis=(0, 1))
        dxhat = g * gamma.data
        if training:
            gx = (inv / count) * (
                count * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1))
            ) * w
        else:
            gx = dxhat * inv
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), vjp)


def masked_max_pool(x, node_mask) -> Tensor:
    """Per-feature maximum over valid nodes: ``x[B, N, F] -> [B, F]``."""
    x = _as_tensor(x)
    m = np.asarray(node_mask, dtype=bool)
    if x.ndim != 3 or m.shape != x.shape[:2]:
        raise DimensionError(f"masked_max_pool expects x[B,N,F] and mask[B,N], got {x.shape}, {m.shape}")
    if not m.any(axis=1).all():
        raise DegenerateError("masked_max_pool: a graph has no valid nodes")
    filled = np.where(m[..., None], x.data, -np.inf)
    arg = filled.argmax(axis=1)  # [B, F]
    out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full,)

    return _record(out, (x,), vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n_cls = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise DataFormatError(f"label out of range [0, {n_cls}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / labels.size),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# Initialization and optimization
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def flush_subnormals(a: np.ndarray) -> np.ndarray:
    """Zero entries below the smallest normal float, in place.

    Parameters of dead units decay geometrically under weight decay and end up
    subnormal; a GEMM touching them runs two orders of magnitude slower.
    """
    if a.dtype.kind == "f":
        a[np.abs(a) < np.finfo(a.dtype).tiny] = 0
    return a


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    Returns fresh parameter tensors; ``state`` is advanced in place and returned.
    Parameters and moments are flushed to zero below the normal range.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape:
            raise UsageError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new = {}
    for name, p in params.items():
        theta = p.data
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        flush_subnormals(m)
        flush_subnormals(v)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        theta = flush_subnormals((theta - update).astype(theta.dtype, copy=False))
        new[name] = Tensor(theta, requires_grad=True, name=name)
    return new, state


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-based relative error.

    ``floor`` keeps vanishing gradients from turning central-difference
    rounding noise (about 1e-11 at step 1e-5) into a large ratio.
    """
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5) -> list[float]:
    """Compare tape gradients of scalar ``fn(*tensors)`` with central differences.

    Returns one relative error per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
    analytic = backward(tape, out, tensors)

    def value():
        return float(fn(*[Tensor(a) for a in arrays]).data)

    errs = []
    for t, a in zip(tensors, arrays):
        numeric = numerical_gradient(value, a, step)
        errs.append(relative_error(analytic[t], numeric))
    return errs

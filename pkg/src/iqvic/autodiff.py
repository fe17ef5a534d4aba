"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every tensor produced while gradient recording is enabled remembers its
parents and a closure that pushes its gradient back to them.  Nodes get a
monotonically increasing id at creation, so sorting the reachable nodes by id
and walking them backwards is a valid reverse topological order.

Arrays may carry leading batch dimensions; the only broadcasting supported is
an operand whose shape equals the trailing dimensions of the other (weights,
biases, gains).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_ids = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    @staticmethod
    def _wrap(arr: np.ndarray) -> Tensor:
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._parents = ()
        t._backward = None
        t._op = "const"
        t._id = next(_ids)
        return t

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor._wrap(data)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead < 0 or g.shape[lead:] != shape:
        raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")
    return g.reshape((-1,) + shape).sum(axis=0)


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "add")

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _acc(a, -g), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: _acc(a, g * c), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "mul")

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: _acc(a, 2.0 * a.data * g), "square")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)

    def backward(g):
        _acc(a, g * (cdf + x * pdf))

    return _make(x * cdf, (a,), backward, "gelu")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: _acc(a, g * keep), "dropout")


# reductions ----------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), lambda g: _acc(a, np.full(a.shape, float(g))), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array(a.data.mean()), (a,), lambda g: _acc(a, np.full(a.shape, float(g) / n)), "mean")


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared across ``a``'s batch dimensions or
    has exactly ``a``'s batch dimensions.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2

    def backward(g):
        if a.requires_grad:
            _acc(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared:
                k, n = b.shape
                _acc(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _acc(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: _acc(a, np.transpose(g, inv)), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape)).copy()
    return _make(out, (a,), lambda g: _acc(a, g.reshape(a.shape)), "reshape")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the second-to-last axis (the token axis)."""
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    width = parts[0].shape[-1]
    for p in parts:
        if p.shape[-1] != width or p.shape[:-2] != parts[0].shape[:-2]:
            raise DimensionError(f"concat_rows: mismatched shapes {[q.shape for q in parts]}")
    sizes = [p.shape[-2] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _acc(p, g[..., lo:hi, :])

    return _make(np.concatenate([p.data for p in parts], axis=-2), parts, backward, "concat")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros(a.shape)
        full[..., start:stop, :] = g
        _acc(a, full)

    return _make(a.data[..., start:stop, :].copy(), (a,), backward, "slice")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; ``ids`` may have any shape."""
    idx = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = sorted(set(int(i) for i in idx.ravel() if i < 0 or i >= n))
        raise IndexError(f"ids {bad} out of range for table with {n} rows")

    def backward(g):
        full = np.zeros(table.shape)
        np.add.at(full, idx.ravel(), g.reshape(-1, table.shape[1]))
        _acc(table, full)

    return _make(table.data[idx], (table,), backward, "take")


# normalisation & losses ----------------------------------------------------

def softmax_lastdim(x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Row softmax with max subtraction.

    ``additive_mask`` holds 0 for allowed and ``-inf`` for blocked entries;
    blocked probabilities are exactly zero.
    """
    if x.shape[-1] < 1:
        raise ContractError("softmax over an empty axis")
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _acc(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _acc(x, dx)
        _acc(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _acc(bias, g.reshape(-1, d).sum(axis=0))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Masked mean of -log softmax(logits)[target].

    For batched logits ``(B, n, V)`` each sample is averaged over its own
    masked-in positions and the result is the mean over samples.
    """
    V = logits.shape[-1]
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {tgt.shape} do not match logits {logits.shape}")
    m = np.ones(tgt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != tgt.shape:
        raise DimensionError(f"mask {m.shape} does not match targets {tgt.shape}")
    if np.any((tgt[m] < 0) | (tgt[m] >= V)):
        raise IndexError(f"target outside vocabulary of size {V}")
    safe = np.where(m, tgt, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    counts = m.sum(axis=-1, keepdims=True).astype(DTYPE)
    if np.any(counts == 0):
        raise ContractError("cross_entropy needs at least one masked-in position per sample")
    n_samples = 1 if tgt.ndim <= 1 else int(np.prod(tgt.shape[:-1]))
    weights = m / counts / n_samples
    loss = -(picked * weights).sum()

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        _acc(logits, float(g) * grad * weights[..., None])

    return _make(np.array(loss), (logits,), backward, "cross_entropy")


# graph traversal -----------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen.add(t._id)
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Back-propagate a scalar loss.

    Gradients accumulate into ``.grad`` of every reached leaf.  Parameters in
    ``params`` that require grad but were not reached get zero gradients.
    Returns a map from ``id(param)`` to its gradient.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        nodes = _reachable(loss)
        _acc(loss, np.ones(()))
        for node in nodes:
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            node.grad = None  # interior gradients are not kept
    out: dict[int, np.ndarray] = {}
    for p in params:
        if p.requires_grad:
            if p.grad is None:
                p.grad = np.zeros(p.shape)
            out[id(p)] = p.grad
    return out

"""Dense tensors with reverse-mode automatic differentiation.

Every operation records a node on an implicit tape (creation order is a valid
topological order, since parents always exist before their results).
`backward` walks the reachable part of the tape in reverse and accumulates
gradients into every leaf that requires them; frozen leaves are skipped
entirely, so a frozen subtree costs nothing and receives no gradient.

All math is plain numpy in a fixed dtype (float32 by default, float64 for
gradient checking), which keeps runs bitwise deterministic for a fixed seed.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateBatchError, ShapeError

_NODE_COUNTER = itertools.count()
_GRAD_ENABLED = True

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# Large-but-finite additive mask value: exp() of it underflows to exactly 0,
# and adding it to any score of ordinary magnitude is bitwise absorbing.
MASK_VALUE = -1e30


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array plus its position in the autodiff graph.

    `grad` stays None until `backward` deposits something; leaves created
    with requires_grad=False never receive one.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_pos")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._pos = next(_NODE_COUNTER)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad.

    The loss must be a scalar produced by recorded operations.  Intermediate
    node gradients are kept only while needed; each node's backward runs
    exactly once.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # Reachable interior nodes, discovered once; creation order is topological.
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._grad_fn is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._pos, reverse=True)

    _accumulate(loss, np.ones((), dtype=loss.data.dtype))
    for node in nodes:
        g = node.grad
        if g is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is not None and parent.requires_grad:
                _accumulate(parent, pg)
        node.grad = None  # interior grads are consumed, only leaves keep theirs


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not chain: {a.shape} @ {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (g.T,)

    return _result(a.data.T, (a,), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the second operand may be a row vector broadcast over rows."""
    if a.shape == b.shape:
        def grad_fn(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def grad_fn(g):
            return g, g.sum(axis=0)
    else:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
    return _result(a.data + b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul expects matching shapes, got {a.shape} * {b.shape}")

    def grad_fn(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def grad_fn(g):
        return (g * s,)

    return _result(a.data * np.asarray(s, dtype=a.data.dtype), (a,), grad_fn)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    e = erf(x * _INV_SQRT2).astype(x.dtype)
    out = 0.5 * x * (1.0 + e)

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * np.asarray(_INV_SQRT2PI, dtype=x.dtype)
        return (g * (0.5 * (1.0 + e) + x * pdf),)

    return _result(out.astype(x.dtype), (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, computed piecewise so no exp ever overflows."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), grad_fn)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    x = a.data
    if x.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"layernorm expects [rows, d>=2], got {x.shape}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _result(out, (a, gain, bias), grad_fn)


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept entries scaled by 1/(1-p); identity in eval mode."""
    from .errors import ConfigError

    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        def grad_fn(g):
            return (g,)

        return _result(a.data, (a,), grad_fn)

    keep = (rng.random(a.shape) >= p).astype(a.data.dtype)
    mask = keep / np.asarray(1.0 - p, dtype=a.data.dtype)

    def grad_fn(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), grad_fn)


def softmax_ce(logits: Tensor, targets: np.ndarray, keep: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy over the kept positions; gradient flows only to logits."""
    x = logits.data
    n, v = x.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} rows")
    if targets.min() < 0 or targets.max() >= v:
        raise ContractError(f"target ids must lie in [0, {v})")
    if keep is None:
        keep = np.ones(n, dtype=bool)
    keep = np.asarray(keep, dtype=bool)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise DegenerateBatchError("cross-entropy over zero unmasked positions")

    shifted = x - x.max(axis=1, keepdims=True)
    expx = np.exp(shifted)
    probs = expx / expx.sum(axis=1, keepdims=True)
    logp = shifted - np.log(expx.sum(axis=1, keepdims=True))
    loss = -logp[idx, targets[idx]].mean()

    def grad_fn(g):
        d = np.zeros_like(x)
        d[idx] = probs[idx]
        d[idx, targets[idx]] -= 1.0
        d[idx] *= g / np.asarray(idx.size, dtype=x.dtype)
        return (d,)

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), grad_fn)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over one sequence.

    q, k, v are [S, d] with d divisible by n_heads; `mask` is an additive
    [S, S] array of 0 / MASK_VALUE entries (None means full attention).
    """
    s, d = q.shape
    if d % n_heads != 0:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    inv_scale = np.asarray(1.0 / np.sqrt(hd), dtype=q.data.dtype)

    qh = q.data.reshape(s, n_heads, hd).transpose(1, 0, 2)
    kh = k.data.reshape(s, n_heads, hd).transpose(1, 0, 2)
    vh = v.data.reshape(s, n_heads, hd).transpose(1, 0, 2)

    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * inv_scale
    if mask is not None:
        scores = scores + mask[None, :, :].astype(scores.dtype)
    scores -= scores.max(axis=2, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=2, keepdims=True)
    out_h = np.matmul(w, vh)
    out = out_h.transpose(1, 0, 2).reshape(s, d)

    def grad_fn(g):
        gh = g.reshape(s, n_heads, hd).transpose(1, 0, 2)
        dw = np.matmul(gh, vh.transpose(0, 2, 1))
        dv = np.matmul(w.transpose(0, 2, 1), gh)
        ds = w * (dw - (dw * w).sum(axis=2, keepdims=True))
        dq = np.matmul(ds, kh) * inv_scale
        dk = np.matmul(ds.transpose(0, 2, 1), qh) * inv_scale
        to_flat = lambda h: h.transpose(1, 0, 2).reshape(s, d)
        return to_flat(dq), to_flat(dk), to_flat(dv)

    return _result(out, (q, k, v), grad_fn)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"ids must be a flat index list, got shape {ids.shape}")

    def grad_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _result(table.data[ids], (table,), grad_fn)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows needs equal widths, got {sorted(widths)}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def grad_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), grad_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[0]:
        raise ContractError(f"row slice [{start}, {stop}) out of bounds for {a.shape}")

    def grad_fn(g):
        da = np.zeros_like(a.data)
        da[start:stop] = g
        return (da,)

    return _result(a.data[start:stop].copy(), (a,), grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), grad_fn)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def grad_fn(g):
        return (np.full_like(a.data, g),)

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), grad_fn)

"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the model is a `Tensor` wrapping a numpy float64 array.
Operations build a dynamic acyclic graph; `backward` walks it once in
reverse topological order and returns a `GradientMap`. Graphs are never
mutated in place, so a tensor whose values are computed is immutable and
safe to share.

Broadcasting is deliberately narrow: `add` accepts equal shapes or a
1-D bias vector over the last axis, everything else must match exactly.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

_node_ids = itertools.count()

# Grad recording is process-global; `no_grad()` turns it off for inference.
_grad_enabled = True

# Live-tensor accounting used by the cost profiler.
_live_bytes = 0
_peak_bytes = 0

GELU_TANH_COEFF = 0.7978845608  # sqrt(2/pi), fixed so results are bit-stable
_GELU_CUBIC = 0.044715


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / frozen passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def reset_peak_bytes() -> None:
    global _peak_bytes
    _peak_bytes = _live_bytes


def peak_bytes() -> int:
    return _peak_bytes


class Tensor:
    """A dense float64 array that is also a node in the autodiff graph.

    `parents` and `grad_fn` are set only while grad recording is enabled and
    at least one operand requires grad; otherwise the node is a detached leaf.
    """

    __slots__ = ("values", "requires_grad", "node_id", "parents", "grad_fn", "__weakref__")

    def __init__(self, values, requires_grad=False, parents=(), grad_fn=None):
        global _live_bytes, _peak_bytes
        self.values = values
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.parents = parents
        self.grad_fn = grad_fn
        _live_bytes += values.nbytes
        if _live_bytes > _peak_bytes:
            _peak_bytes = _live_bytes

    def __del__(self):
        global _live_bytes
        _live_bytes -= self.values.nbytes

    @property
    def shape(self):
        return list(self.values.shape)

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of size {self.values.size}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def create(shape, values, requires_grad=False) -> Tensor:
    """Build a leaf tensor from a flat row-major value list."""
    shape = list(shape)
    n = 1
    for d in shape:
        if d < 0:
            raise ValueError(f"negative dimension {d}")
        n *= d
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if n != flat.size:
        raise ValueError(f"length mismatch {n} vs {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise ValueError("non-finite values in tensor creation")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad)


def from_array(arr, requires_grad=False) -> Tensor:
    """Wrap an existing array (copied, cast to float64) as a leaf."""
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=requires_grad)


def _make(values, parents, grad_fn):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=tuple(parents), grad_fn=grad_fn)
    return Tensor(values, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition; `b` may be a 1-D bias vector over the last axis."""
    bias = b.values.ndim == 1 and a.values.ndim > 1
    if bias:
        if a.values.shape[-1] != b.values.shape[0]:
            raise ValueError(
                f"incompatible shapes for add: {list(a.values.shape)} vs {list(b.values.shape)}"
            )
    elif a.values.shape != b.values.shape:
        raise ValueError(
            f"incompatible shapes for add: {list(a.values.shape)} vs {list(b.values.shape)}"
        )
    out = a.values + b.values

    def grad_fn(g):
        gb = g.sum(axis=tuple(range(g.ndim - 1))) if bias else g
        return g, gb

    return _make(out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape != b.values.shape:
        raise ValueError(
            f"incompatible shapes for sub: {list(a.values.shape)} vs {list(b.values.shape)}"
        )
    return _make(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape != b.values.shape:
        raise ValueError(
            f"incompatible shapes for mul: {list(a.values.shape)} vs {list(b.values.shape)}"
        )
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.values * s, (a,), lambda g: (g * s,))


def gelu(a: Tensor) -> Tensor:
    """GELU via the tanh approximation (coefficient fixed in GELU_TANH_COEFF)."""
    x = a.values
    inner = GELU_TANH_COEFF * (x + _GELU_CUBIC * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = GELU_TANH_COEFF * (1.0 + 3.0 * _GELU_CUBIC * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        return (g * local,)

    return _make(out, (a,), grad_fn)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch on op kind: add/sub/mul take two tensors, gelu one, scale a scalar."""
    if op_kind == "gelu":
        return gelu(a)
    if op_kind == "scale":
        return scale(a, b)
    if op_kind in _ELEMENTWISE:
        return _ELEMENTWISE[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, 2-D or batched 3-D (leading axis must match)."""
    av, bv = a.values, b.values
    if av.ndim == bv.ndim and av.ndim in (2, 3):
        if av.shape[-1] != bv.shape[-2] or (av.ndim == 3 and av.shape[0] != bv.shape[0]):
            raise ValueError(
                f"matmul dimension mismatch: {list(av.shape)} vs {list(bv.shape)}"
            )
    else:
        raise ValueError(f"matmul dimension mismatch: {list(av.shape)} vs {list(bv.shape)}")
    out = av @ bv

    def grad_fn(g):
        bt = np.swapaxes(bv, -1, -2)
        at = np.swapaxes(av, -1, -2)
        return g @ bt, at @ g

    return _make(out, (a, b), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtraction before exponentiation)."""
    v = x.values
    if not (-v.ndim <= axis < v.ndim):
        raise ValueError(f"softmax axis {axis} invalid for rank {v.ndim}")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _make(s, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    d = x.values.shape[-1]
    if gain.values.shape != (d,) or bias.values.shape != (d,):
        raise ValueError(
            f"layer_norm gain/bias must have shape [{d}], got "
            f"{list(gain.values.shape)} and {list(bias.values.shape)}"
        )
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    out = xhat * gain.values + bias.values

    def grad_fn(g):
        gw = g * gain.values
        dx = inv * (gw - gw.mean(axis=-1, keepdims=True)
                    - xhat * (gw * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), grad_fn)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean token-level negative log-likelihood over the target positions."""
    v = logits.values
    if v.ndim != 2:
        raise ValueError(f"cross_entropy expects [T,V] logits, got {list(v.shape)}")
    t_count, vocab = v.shape
    targets = list(targets)
    if len(targets) != t_count:
        raise ValueError(f"targets length {len(targets)} vs {t_count} logit rows")
    if t_count < 1:
        raise ValueError("cross_entropy requires at least one target")
    for pos, t in enumerate(targets):
        if not (0 <= t < vocab):
            raise ValueError(f"target {t} out of range [0,{vocab}) at position {pos}")
    ids = np.asarray(targets, dtype=np.intp)
    m = v.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(v - m).sum(axis=1))
    picked = v[np.arange(t_count), ids]
    loss = np.float64((lse - picked).mean())

    def grad_fn(g):
        p = np.exp(v - lse[:, None])
        p[np.arange(t_count), ids] -= 1.0
        return (p * (float(g) / t_count),)

    return _make(np.asarray(loss), (logits,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.values.sum())
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.values.shape).copy(),))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of a 2-D tensor."""
    v = x.values
    if v.ndim != 2 or v.shape[0] < 1:
        raise ValueError(f"mean_rows expects nonempty [N,d], got {list(v.shape)}")
    n = v.shape[0]
    return _make(v.mean(axis=0), (x,), lambda g: (np.tile(g / n, (n, 1)),))


def concat_rows(parts) -> Tensor:
    """Concatenate 2-D tensors along axis 0."""
    parts = list(parts)
    out = np.concatenate([p.values for p in parts], axis=0)
    sizes = [p.values.shape[0] for p in parts]

    def grad_fn(g):
        grads, off = [], 0
        for s in sizes:
            grads.append(g[off:off + s])
            off += s
        return tuple(grads)

    return _make(out, tuple(parts), grad_fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.values.shape[0]
    if not (0 <= start <= stop <= n):
        raise ValueError(f"row slice [{start}:{stop}] invalid for {n} rows")
    out = x.values[start:stop].copy()

    def grad_fn(g):
        full = np.zeros_like(x.values)
        full[start:stop] = g
        return (full,)

    return _make(out, (x,), grad_fn)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a 2-D table by index; gradients scatter-add back."""
    ids = list(ids)
    n = table.values.shape[0]
    for pos, i in enumerate(ids):
        if not (0 <= i < n):
            raise ValueError(f"row id {i} out of range [0,{n}) at position {pos}")
    idx = np.asarray(ids, dtype=np.intp)
    out = table.values[idx].copy() if ids else np.zeros((0, table.values.shape[1]))

    def grad_fn(g):
        full = np.zeros_like(table.values)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (table,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.values.shape
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inv),))


class GradientMap:
    """Gradients keyed by node id; absent leaves read as exact zeros."""

    def __init__(self, grads):
        self._grads = grads

    def get(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(tensor.node_id)
        if g is None:
            return np.zeros_like(tensor.values)
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.node_id in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor) -> GradientMap:
    """Reverse-accumulate gradients of a scalar loss over its graph."""
    if loss.values.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.node_id not in visited and p.requires_grad:
                stack.append((p, False))

    grads = {loss.node_id: np.ones_like(loss.values)}
    leaf_grads = {}
    for node in reversed(topo):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.grad_fn is None:
            if node.requires_grad:
                leaf_grads[node.node_id] = g
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad:
                continue
            acc = grads.get(parent.node_id)
            if acc is None:
                grads[parent.node_id] = pg.copy() if pg.base is not None else pg
            else:
                acc += pg
    return GradientMap(leaf_grads)

"""A small reverse-mode gradient tape.

Only the operations the imputation model needs are provided. Values are
float64 numpy arrays; most ops accept an optional leading batch axis so the
corruption variants can be pushed through as one 3-D tensor.

Nodes are recorded on a :class:`Tape` in creation order, which is already a
topological order, so :func:`backward` is a single reverse sweep.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, ShapeError

_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_backward_fault(op: str):
    """Deliberately break the backward rule of ``op`` (negative control for gradcheck)."""
    _FAULTS.add(op)
    try:
        yield
    finally:
        _FAULTS.discard(op)


class Node:
    __slots__ = ("value", "_grad", "tape", "parents", "_backward", "requires_grad", "id", "_gen", "__weakref__")

    def __init__(self, tape: "Tape", value: np.ndarray, parents: tuple = (),
                 backward_fn: Callable | None = None, requires_grad: bool = False):
        self.value = value
        self._grad = None
        self.tape = tape
        self.parents = parents
        self._backward = backward_fn
        self.requires_grad = requires_grad
        self._gen = tape._generation
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Node):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Node):
            raise TypeError("node * node is not supported; use mul_const with a constant")
        if np.ndim(other) == 0:
            return scale(self, float(other))
        return mul_const(self, other)

    __rmul__ = __mul__


class Tape:
    """Owns the nodes of one forward/backward pass and the RNG for its masks."""

    def __init__(self, seed=None):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.nodes: list[Node] = []
        self._generation = 0
        self._consumed = False

    def constant(self, value) -> Node:
        return Node(self, np.array(value, dtype=np.float64), requires_grad=False)

    def parameter(self, value) -> Node:
        return Node(self, np.array(value, dtype=np.float64), requires_grad=True)

    def clear(self) -> None:
        """Drop every node; nodes created before the call become unusable."""
        for node in self.nodes:
            node._backward = None
            node.parents = ()
        self.nodes = []
        self._generation += 1
        self._consumed = False

    def backward(self, loss: Node) -> dict:
        return backward(loss)

    def __len__(self):
        return len(self.nodes)


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for node in nodes:
        if not isinstance(node, Node):
            raise TypeError(f"expected Node, got {type(node).__name__}")
        if node.tape is not tape:
            raise ContractError("nodes belong to different tapes")
        if node._gen != tape._generation:
            raise ContractError("node was created before the tape was cleared")
    return tape


def _make(value: np.ndarray, parents: tuple, backward_fn: Callable) -> Node:
    tape = _tape_of(*parents)
    requires = any(p.requires_grad for p in parents)
    return Node(tape, value, parents if requires else (), backward_fn if requires else None, requires)


def _accumulate(node: Node, g: np.ndarray, fresh: bool = False) -> None:
    """Add ``g`` into ``node``'s gradient.

    ``fresh=True`` promises that ``g`` is a new array nobody else holds, so it
    can become the gradient buffer without a copy.
    """
    if not node.requires_grad:
        return
    if node._grad is None:
        if fresh and isinstance(g, np.ndarray) and g.dtype == np.float64 and g.shape == node.value.shape \
                and g.flags.c_contiguous and g.flags.owndata:
            node._grad = g
        else:
            node._grad = np.array(np.broadcast_to(g, node.value.shape), dtype=np.float64, copy=True)
    else:
        node._grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Node, b: Node) -> Node:
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(value, (a, b), bw)


def shift(x: Node, c) -> Node:
    c = np.asarray(c, dtype=np.float64)
    return _make(x.value + c, (x,), lambda g: _accumulate(x, _unbroadcast(g, x.shape)))


def scale(x: Node, s: float) -> Node:
    return _make(x.value * s, (x,), lambda g: _accumulate(x, g * s, fresh=True))


def mul_const(x: Node, c) -> Node:
    """Elementwise product with a constant (broadcast onto ``x``)."""
    c = np.asarray(c, dtype=np.float64)
    try:
        value = x.value * c
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {x.shape} and {c.shape}") from exc
    if value.shape != x.shape:
        raise ShapeError(f"constant of shape {c.shape} would broadcast {x.shape} to {value.shape}")
    return _make(value, (x,), lambda g: _accumulate(x, g * c, fresh=True))


def sum_all(x: Node) -> Node:
    return _make(np.array(x.value.sum()), (x,), lambda g: _accumulate(x, np.full(x.shape, float(g))))


def mean_all(x: Node) -> Node:
    size = x.value.size
    return _make(np.array(x.value.mean()), (x,), lambda g: _accumulate(x, np.full(x.shape, float(g) / size)))


def concat_cols(a: Node, b: Node) -> Node:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"row mismatch in concat_cols: {a.shape} vs {b.shape}")
    da = a.shape[-1]
    value = np.concatenate([a.value, b.value], axis=-1)

    def bw(g):
        _accumulate(a, g[..., :da])
        _accumulate(b, g[..., da:])

    return _make(value, (a, b), bw)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _make(np.maximum(x.value, 0.0), (x,), lambda g: _accumulate(x, g * mask, fresh=True))


def dropout_keep(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multipliers: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape)
    return (keep >= rate) * (1.0 / (1.0 - rate))


def dropout(x: Node, rate: float, training: bool, rng: np.random.Generator | None = None) -> Node:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    return mul_const(x, dropout_keep(x.shape, rate, rng if rng is not None else x.tape.rng))


def row_dropout_mask(n, skip_rate: float, rng: np.random.Generator) -> np.ndarray:
    """0/1 vector (or array of shape ``n``); each entry is 0 with probability ``skip_rate``."""
    if not 0.0 <= skip_rate < 1.0:
        raise ConfigError(f"skip rate must lie in [0, 1), got {skip_rate}")
    return (rng.random(n) >= skip_rate).astype(np.float64)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    if bv.ndim == 2 and av.ndim > 2:
        lead = av.shape[:-1]
        value = (av.reshape(-1, av.shape[-1]) @ bv).reshape(*lead, bv.shape[-1])
    else:
        try:
            value = np.matmul(av, bv)
        except ValueError as exc:
            raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from exc

    flat = bv.ndim == 2 and av.ndim > 2

    def bw(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accumulate(a, (g2 @ bv.T).reshape(av.shape), fresh=True)
            if b.requires_grad:
                _accumulate(b, av.reshape(-1, av.shape[-1]).T @ g2, fresh=True)
            return
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), b.shape))

    return _make(value, (a, b), bw)


def mlp(c: Node, w1: Node, b1: Node, w2: Node, b2: Node, keep=None, row_scale=None) -> Node:
    """Fused ``(relu(c @ w1 + b1) * keep) @ w2 + b2``, each output row times ``row_scale``.

    ``c`` may carry leading batch axes. ``keep`` matches the hidden layer's
    shape and ``row_scale`` the leading shape of ``c``; either may be None.
    """
    din, hid = w1.shape
    if c.shape[-1] != din or b1.shape != (hid,) or w2.shape[0] != hid or b2.shape != (w2.shape[1],):
        raise ShapeError(f"mlp shapes disagree: c {c.shape}, W1 {w1.shape}, b1 {b1.shape}, "
                         f"W2 {w2.shape}, b2 {b2.shape}")
    lead = c.shape[:-1]
    dout = w2.shape[1]
    c2 = c.value.reshape(-1, din)
    k2 = None if keep is None else np.asarray(keep, dtype=np.float64).reshape(c2.shape[0], hid)
    r1 = None if row_scale is None else np.asarray(row_scale, dtype=np.float64).reshape(c2.shape[0])
    out, ctx = kernels.active.mlp_forward(c2, w1.value, b1.value, w2.value, b2.value, k2, r1)

    def bw(g):
        gc, gw1, gb1, gw2, gb2 = kernels.active.mlp_backward(ctx, g.reshape(-1, dout))
        if "mlp" in _FAULTS:
            gw1 = gw1 * 1.01
        _accumulate(c, gc.reshape(c.shape), fresh=True)
        _accumulate(w1, gw1, fresh=True)
        _accumulate(b1, gb1, fresh=True)
        _accumulate(w2, gw2, fresh=True)
        _accumulate(b2, gb2, fresh=True)

    return _make(out.reshape(*lead, dout), (c, w1, b1, w2, b2), bw)


def _unit_rows(x: np.ndarray):
    r = np.sqrt(np.einsum("...k,...k->...", x, x))
    inv = np.divide(1.0, r, out=np.zeros_like(r), where=r > 0)
    return x * inv[..., None], inv


def _unit_rows_backward(g_unit: np.ndarray, unit: np.ndarray, inv: np.ndarray) -> np.ndarray:
    radial = np.einsum("...k,...k->...", g_unit, unit)
    return (g_unit - unit * radial[..., None]) * inv[..., None]


def cosine_matrix(q: Node, k: Node) -> Node:
    """Pairwise cosine similarity of rows; rows of zero norm score 0 against everything."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"feature dimensions disagree: {q.shape} vs {k.shape}")
    if q.shape[-1] < 1:
        raise ShapeError("cosine_matrix needs at least one feature")
    qu, qinv = _unit_rows(q.value)
    ku, kinv = _unit_rows(k.value)
    value = np.matmul(qu, np.swapaxes(ku, -1, -2))

    def bw(g):
        gq = _unit_rows_backward(np.matmul(g, ku), qu, qinv)
        gk = _unit_rows_backward(np.matmul(np.swapaxes(g, -1, -2), qu), ku, kinv)
        if q is k:
            _accumulate(q, gq + gk)
        else:
            _accumulate(q, gq)
            _accumulate(k, gk)

    parents = (q,) if q is k else (q, k)
    return _make(value, parents, bw)


def softmax_rows(s: Node) -> Node:
    z = s.value - s.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(s, a * (g - (g * a).sum(axis=-1, keepdims=True)))

    return _make(a, (s,), bw)


def attention(x: Node, scale_factor: float | None = None) -> Node:
    """Fused ``softmax(scale * cosine(x, x)) @ x`` on the selected kernel backend."""
    xv = x.value
    if xv.ndim not in (2, 3):
        raise ShapeError(f"attention expects a 2-D or 3-D input, got {xv.shape}")
    x3 = xv[None] if xv.ndim == 2 else xv
    s = float(np.sqrt(x3.shape[-1])) if scale_factor is None else float(scale_factor)
    y, ctx = kernels.active.attention_forward(x3, s)

    def bw(g):
        g3 = g[None] if xv.ndim == 2 else g
        gx = kernels.active.attention_backward(ctx, np.ascontiguousarray(g3), s)
        if "attention" in _FAULTS:
            gx = gx * 1.01
        _accumulate(x, gx.reshape(xv.shape), fresh=xv.ndim == 3)

    return _make(y.reshape(xv.shape), (x,), bw)


# ---------------------------------------------------------------------------
# losses and the reverse sweep


def masked_sq_mean(x: Node, y, mask) -> Node:
    """Mean of ``(x - y)**2`` over cells where ``mask`` is set (0 for an empty mask).

    Reduces the last two axes, so a ``(v, n, d)`` input gives one value per variant.
    """
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if np.broadcast_shapes(x.shape, y.shape, m.shape) != x.shape:
        raise ShapeError(f"masked_sq_mean shapes disagree: {x.shape}, {y.shape}, {m.shape}")
    m = np.broadcast_to(m, x.shape)
    count = m.sum(axis=(-2, -1))
    denom = np.where(count > 0, count, 1.0)
    diff = (x.value - y) * m
    value = (diff * diff).sum(axis=(-2, -1)) / denom
    value = np.where(count > 0, value, 0.0)

    def bw(g):
        coef = np.asarray(g) * 2.0 / denom
        _accumulate(x, diff * coef[..., None, None], fresh=True)

    return _make(np.asarray(value, dtype=np.float64), (x,), bw)


def backward(loss: Node) -> dict:
    """Fill ``.grad`` of every node that ``loss`` depends on.

    Returns ``{parameter_node: grad}`` for the leaf parameters reached.
    """
    tape = _tape_of(loss)
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise ContractError("backward already ran on this tape; clear it or build a new one")
    tape._consumed = True
    if not loss.requires_grad:
        return {}
    loss._grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.id + 1]):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)
    return {n: n._grad if n._grad is not None else np.zeros_like(n.value)
            for n in tape.nodes if n.requires_grad and n._backward is None}


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def parameters(nodes: Iterable[Node]) -> list:
    return [n for n in nodes if n.requires_grad and n._backward is None]

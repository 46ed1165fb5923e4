"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension ``nicaimpute._kernels`` is used when it imports and
``NICA_KERNEL`` is not set to ``python``. Every backend provides:

``attention_forward(x, scale) -> (y, ctx)``
    ``x`` is ``(nb, n, d)``. With ``q`` the unit rows of ``x`` (zero rows stay
    zero), ``y = softmax(scale * q @ q^T) @ x`` with the softmax taken row-wise.

``attention_backward(ctx, gy, scale) -> gx``

``mlp_forward(c, w1, b1, w2, b2, keep, rows) -> (out, ctx)``
    ``out = (relu(c @ w1 + b1) * keep) @ w2 + b2``, each row then scaled by
    ``rows``. ``c`` is 2-D; ``keep`` (same shape as the hidden layer) and
    ``rows`` may be None.

``mlp_backward(ctx, gout) -> (gc, gw1, gb1, gw2, gb2)``

``ctx`` is opaque and backend specific. The numpy attention materializes the
``(nb, n, n)`` weight matrix; the compiled one keeps O(n d) state and
recomputes the weights on the way back. Backends agree to rounding error,
not bitwise.
"""

from __future__ import annotations

import os
from typing import Callable, NamedTuple

import numpy as np


class Backend(NamedTuple):
    name: str
    attention_forward: Callable
    attention_backward: Callable
    mlp_forward: Callable
    mlp_backward: Callable


def numpy_attention_forward(x: np.ndarray, scale: float):
    x = np.ascontiguousarray(x, dtype=np.float64)
    r = np.sqrt(np.einsum("bik,bik->bi", x, x))
    inv = np.divide(1.0, r, out=np.zeros_like(r), where=r > 0)
    q = x * inv[..., None]
    s = scale * np.matmul(q, q.transpose(0, 2, 1))
    s -= s.max(axis=2, keepdims=True)
    a = np.exp(s, out=s)
    a /= a.sum(axis=2, keepdims=True)
    y = np.matmul(a, x)
    return y, (x, y, a, q, r)


def numpy_attention_backward(ctx, gy, scale: float) -> np.ndarray:
    x, y, a, q, r = ctx
    gx = np.matmul(a.transpose(0, 2, 1), gy)
    c = np.einsum("bik,bik->bi", gy, y)
    gs = np.matmul(gy, x.transpose(0, 2, 1))
    gs -= c[..., None]
    gs *= a
    gs *= scale
    gq = np.matmul(gs, q) + np.matmul(gs.transpose(0, 2, 1), q)
    inv = np.divide(1.0, r, out=np.zeros_like(r), where=r > 0)
    radial = np.einsum("bik,bik->bi", gq, q)
    gx += (gq - q * radial[..., None]) * inv[..., None]
    return gx


def numpy_mlp_forward(c, w1, b1, w2, b2, keep=None, rows=None):
    act = np.maximum(c @ w1 + b1, 0.0)
    if keep is not None:
        act *= keep
    out = act @ w2 + b2
    if rows is not None:
        out *= rows[:, None]
    return out, (c, w1, w2, act, keep, rows)


def numpy_mlp_backward(ctx, gout):
    c, w1, w2, act, keep, rows = ctx
    go = gout * rows[:, None] if rows is not None else gout
    gh = go @ w2.T
    gh *= act > 0
    if keep is not None:
        gh *= keep
    return gh @ w1.T, c.T @ gh, gh.sum(axis=0), act.T @ go, go.sum(axis=0)


NUMPY = Backend("python", numpy_attention_forward, numpy_attention_backward,
                numpy_mlp_forward, numpy_mlp_backward)


def _compiled() -> Backend | None:
    try:
        from nicaimpute import _kernels
    except ImportError:
        return None
    return Backend("compiled", _kernels.forward, _kernels.backward, _kernels.mlp_fwd, _kernels.mlp_bwd)


def available_backends() -> dict[str, Backend]:
    """Every backend importable here, keyed by name."""
    out = {"python": NUMPY}
    compiled = _compiled()
    if compiled is not None:
        out["compiled"] = compiled
    return out


def _select() -> Backend:
    if os.environ.get("NICA_KERNEL", "").lower() == "python":
        return NUMPY
    return _compiled() or NUMPY


active = _select()
BACKEND = active.name


def use(name: str) -> Backend:
    """Switch the process-wide backend (``"python"`` or ``"compiled"``)."""
    global active, BACKEND
    backends = available_backends()
    if name not in backends:
        raise ValueError(f"kernel backend {name!r} is not available; have {sorted(backends)}")
    active = backends[name]
    BACKEND = name
    return active

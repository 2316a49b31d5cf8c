"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects and records its
adjoint on the active tape. Shapes follow numpy broadcasting unless noted.
The LSTM cell and attention are single fused nodes with hand-written
adjoints; the recurrent models spend nearly all their time in them.
"""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tensor, as_tensor, check_finite, record

EPS_PROB = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value + b.value)
    record([out], [a, b], lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value - b.value)
    record([out], [a, b], lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = Tensor(av * bv)
    record([out], [a, b], lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.value)
    record([out], [a], lambda g: (-g,))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.value * c)
    record([out], [a], lambda g: (g * c,))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    out = Tensor(y)
    record([out], [a], lambda g: (g * (1.0 - y * y),))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.value)
    out = Tensor(y)
    record([out], [a], lambda g: (g * y * (1.0 - y),))
    return out


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.value
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    y = np.where(x > 0, x, neg_part)
    out = Tensor(y)
    record([out], [a], lambda g: (g * np.where(x > 0, 1.0, neg_part + alpha),))
    return out


def exp(a: Tensor) -> Tensor:
    y = check_finite(np.exp(a.value), "exp")
    out = Tensor(y)
    record([out], [a], lambda g: (g * y,))
    return out


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise NumericError("log of a non-positive value")
    out = Tensor(np.log(x))
    record([out], [a], lambda g: (g / x,))
    return out


def grl(x: Tensor, lam: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, multiplies the adjoint by -lam."""
    if lam < 0:
        raise ValueError("GRL strength must be non-negative")
    out = Tensor(x.value.copy())
    record([out], [x], lambda g: (-lam * g,))
    return out


# -- linear algebra and shape ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n) and a 2-D ``b`` of shape (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    out = Tensor(av @ bv)

    def back(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    record([out], [a, b], back)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` as one node."""
    xv, wv = x.value, w.value
    y = xv @ wv
    if b is not None:
        y = y + b.value
    out = Tensor(y)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    record([out], [x, w] if b is None else [x, w, b], back)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = Tensor(a.value.reshape(shape))
    record([out], [a], lambda g: (g.reshape(src),))
    return out


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = a.shape
    out = Tensor(np.sum(a.value, axis=axis))

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    record([out], [a], back)
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis))
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    record([out], parts, back)
    return out


def stack(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.stack([p.value for p in parts], axis=axis))
    n = len(parts)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    record([out], parts, back)
    return out


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced numpy indexing with a scatter-add adjoint."""
    out = Tensor(a.value[key])
    src = a.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, key, g)
        return (full,)

    record([out], [a], back)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")
    out = Tensor(table.value[ids])

    def back(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    record([out], [table], back)
    return out


# -- probability -------------------------------------------------------------

def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Max-stabilised softmax over the last axis."""
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    y = _softmax(x.value)
    out = Tensor(y)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    record([out], [x], back)
    return out


def cross_entropy(probs: Tensor, targets, weights=None) -> Tensor:
    """Summed ``-w * log(p[target])`` over rows, with p clamped at 1e-12.

    ``probs`` has shape (..., K); ``targets`` has the leading shape. A weight
    of zero masks a row out entirely (used for padding).
    """
    pv = probs.value
    targets = np.asarray(targets, dtype=np.int64)
    k = pv.shape[-1]
    if targets.shape != pv.shape[:-1]:
        raise ValueError("targets must match the leading shape of probs")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target class out of range [0, {k})")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    picked = np.take_along_axis(pv, targets[..., None], axis=-1)[..., 0]
    clamped = np.maximum(picked, EPS_PROB)
    out = Tensor(np.sum(-w * np.log(clamped)))

    def back(g):
        full = np.zeros_like(pv)
        gp = np.where(picked > EPS_PROB, -w / clamped, 0.0) * g
        np.put_along_axis(full, targets[..., None], gp[..., None], axis=-1)
        return (full,)

    record([out], [probs], back)
    return out


# -- fused recurrent cell ----------------------------------------------------

def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor, mask=None):
    """One LSTM step over a batch.

    ``w`` has shape (D + H, 4H) with gate blocks ordered i, f, g, o and ``b``
    shape (4H,). Rows with ``mask == 0`` carry (h, c) through unchanged.
    Returns ``(h_new, c_new)``.
    """
    xv, hv, cv = x.value, h.value, c.value
    hid = hv.shape[-1]
    if w.shape != (xv.shape[-1] + hid, 4 * hid) or b.shape != (4 * hid,) or cv.shape != hv.shape:
        raise ValueError(
            f"lstm_cell shape mismatch: x{xv.shape} h{hv.shape} c{cv.shape} w{w.shape} b{b.shape}"
        )
    xh = np.concatenate([xv, hv], axis=-1)
    pre = xh @ w.value + b.value
    i = _sigmoid(pre[:, :hid])
    f = _sigmoid(pre[:, hid:2 * hid])
    gg = np.tanh(pre[:, 2 * hid:3 * hid])
    o = _sigmoid(pre[:, 3 * hid:])
    c_new = f * cv + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)[:, None]
        h_out = np.where(keep, h_new, hv)
        c_out = np.where(keep, c_new, cv)
    else:
        keep = None
        h_out, c_out = h_new, c_new
    ho, co = Tensor(h_out), Tensor(c_out)

    def back(gh, gc):
        if keep is not None:
            gh_pass = np.where(keep, 0.0, gh)
            gc_pass = np.where(keep, 0.0, gc)
            gh = np.where(keep, gh, 0.0)
            gc = np.where(keep, gc, 0.0)
        go = gh * tc
        gc_tot = gc + gh * o * (1.0 - tc * tc)
        gf = gc_tot * cv
        gi = gc_tot * gg
        gg_ = gc_tot * i
        gc_prev = gc_tot * f
        dpre = np.concatenate(
            [gi * i * (1 - i), gf * f * (1 - f), gg_ * (1 - gg * gg), go * o * (1 - o)], axis=-1
        )
        dxh = dpre @ w.value.T
        gw = xh.T @ dpre
        gb = dpre.sum(axis=0)
        gx = dxh[:, : xv.shape[-1]]
        gh_prev = dxh[:, xv.shape[-1]:]
        if keep is not None:
            gh_prev = gh_prev + gh_pass
            gc_prev = gc_prev + gc_pass
        return gx, gh_prev, gc_prev, gw, gb

    record([ho, co], [x, h, c, w, b], back)
    return ho, co


# -- fused attention ---------------------------------------------------------

def attention(query: Tensor, keys: Tensor, values: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention with one query per batch row.

    ``query`` (B, d); ``keys`` and ``values`` (B, T, d). Masked steps get zero
    weight. Sums over time run step by step so that appending masked steps
    leaves every result bit-identical.
    """
    qv, kv, vv = query.value, keys.value, values.value
    bsz, steps, d = kv.shape
    if steps == 0:
        raise ValueError("attention over an empty sequence")
    if qv.shape != (bsz, d):
        raise ValueError(f"query shape {qv.shape} does not match keys {kv.shape}")
    m = np.ones((bsz, steps), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m[:, 0].all():
        raise ValueError("every sequence needs at least one unmasked step")
    inv = 1.0 / np.sqrt(d)
    scores = np.empty((bsz, steps))
    for t in range(steps):
        scores[:, t] = np.einsum("bd,bd->b", qv, kv[:, t]) * inv
    scores = np.where(m, scores, -np.inf)
    mx = scores.max(axis=1)
    e = np.where(m, np.exp(scores - mx[:, None]), 0.0)
    den = np.zeros(bsz)
    for t in range(steps):
        den = den + e[:, t]
    a = e / den[:, None]
    ctx = np.zeros((bsz, vv.shape[-1]))
    for t in range(steps):
        ctx = ctx + a[:, t, None] * vv[:, t]
    out = Tensor(ctx)

    def back(g):
        ga = np.einsum("bd,btd->bt", g, vv)
        gv = a[:, :, None] * g[:, None, :]
        gs = a * (ga - (ga * a).sum(axis=1, keepdims=True))
        gs = np.where(m, gs, 0.0) * inv
        gq = np.einsum("bt,btd->bd", gs, kv)
        gk = gs[:, :, None] * qv[:, None, :]
        return gq, gk, gv

    record([out], [query, keys, values], back)
    return out


def attention_weights(query: np.ndarray, keys: np.ndarray, mask=None) -> np.ndarray:
    """Attention weights only, for inspection."""
    d = keys.shape[-1]
    s = np.einsum("bd,btd->bt", query, keys) / np.sqrt(d)
    if mask is not None:
        s = np.where(np.asarray(mask, dtype=bool), s, -np.inf)
    return _softmax(s)

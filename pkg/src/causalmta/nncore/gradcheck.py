from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NumericError, Tape, Tensor


def _scalar(t) -> float:
    v = np.asarray(t.value if isinstance(t, Tensor) else t)
    if v.size != 1:
        raise ValueError("function must return a scalar")
    return float(v.reshape(-1)[0])


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor. The error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x.value if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("function returned a non-finite value")
    tape.backward(out)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = _scalar(f(Tensor(x0.copy())))
        flat[i] = old - eps
        fm = _scalar(f(Tensor(x0.copy())))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("function returned a non-finite value")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


def param_grad_check(loss_fn: Callable[[], Tensor], params, eps: float = 1e-5,
                     max_coords: int | None = None, rng: np.random.Generator | None = None,
                     floor: float = 1e-6, reference_fn: Callable[[], object] | None = None) -> float:
    """Finite-difference check of ``loss_fn`` against every parameter.

    ``loss_fn`` must rebuild its graph from the current parameter values on
    each call. When ``max_coords`` is set, that many coordinates per
    parameter are sampled. The error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; central
    differences on an O(1) loss carry ~1e-10 of round-off, so relative error
    on coordinates much smaller than ``floor`` measures noise, not the adjoint.

    ``reference_fn``, when given, is differenced instead of ``loss_fn``. A
    gradient-reversal layer makes the tape gradient differ from the loss's
    derivative on purpose, so those checks need the objective the reversed
    gradient actually descends.
    """
    ref = loss_fn if reference_fn is None else reference_fn
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = _scalar(ref())
            flat[i] = old - eps
            fm = _scalar(ref())
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            ana = analytic.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        p.zero_grad()
    return worst

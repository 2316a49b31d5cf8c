"""Dense float64 tensors and the reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape`. Outside
a ``with Tape():`` block nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """A tensor op produced NaN or Inf."""


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("value", "requires_grad", "grad", "name", "_is_leaf")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        v = np.asarray(value, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.value = v if v.flags.c_contiguous else np.ascontiguousarray(v)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("outs", "parents", "backward")

    def __init__(self, outs, parents, backward):
        self.outs = outs
        self.parents = parents
        self.backward = backward


_state = threading.local()


def _stack() -> list:
    st = getattr(_state, "tapes", None)
    if st is None:
        st = _state.tapes = []
    return st


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Ordered record of primitive ops, replayed backwards by :meth:`backward`.

    A tape can be differentiated exactly once; a second call raises because
    the intermediate adjoints it relied on have been released.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        assert st and st[-1] is self
        st.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, outs: Sequence[Tensor], parents: Sequence[Tensor], backward: Callable) -> None:
        if self._consumed:
            raise RuntimeError("tape already differentiated; start a new forward pass")
        for o in outs:
            o.requires_grad = True
            o._is_leaf = False
        self._nodes.append(_Node(tuple(outs), tuple(parents), backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
        if self._consumed:
            raise RuntimeError("backward() called twice on the same tape")
        self._consumed = True
        if loss._is_leaf and not loss.requires_grad:
            raise ValueError("loss was not produced by ops recorded on this tape")
        if seed is None:
            if loss.value.size != 1:
                raise ValueError("backward() on a non-scalar needs an explicit seed")
            seed = np.ones_like(loss.value)
        adj: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
        if loss._is_leaf and loss.requires_grad:
            _accumulate_leaf(loss, adj[id(loss)])
        for node in reversed(self._nodes):
            gs = [adj.pop(id(o), None) for o in node.outs]
            if all(g is None for g in gs):
                continue
            if len(node.outs) == 1:
                pgrads = node.backward(gs[0])
            else:
                gs = [np.zeros_like(o.value) if g is None else g for g, o in zip(gs, node.outs)]
                pgrads = node.backward(*gs)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._is_leaf:
                    _accumulate_leaf(p, pg)
                else:
                    k = id(p)
                    prev = adj.get(k)
                    adj[k] = pg if prev is None else prev + pg
        self._nodes.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.value.shape:
        g = np.broadcast_to(g, t.value.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def record(outs, parents, backward) -> None:
    """Record a node on the active tape if any parent needs a gradient."""
    tape = active_tape()
    if tape is None:
        return
    if not any(p.requires_grad for p in parents):
        return
    tape.record(outs, parents, backward)


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")
    return arr

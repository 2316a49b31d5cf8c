"""Parameters and the small set of layers the models are assembled from."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name and a gradient accumulator."""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad.fill(0.0)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Holds named parameters; submodules are discovered through attributes."""

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def named_parameters(self) -> dict[str, Parameter]:
        found: dict[str, Parameter] = {}
        self._collect(found)
        return dict(sorted(found.items()))

    def _collect(self, found: dict) -> None:
        for v in vars(self).values():
            if isinstance(v, Parameter):
                found[v.name] = v
            elif isinstance(v, Module):
                v._collect(found)
            elif isinstance(v, (list, tuple)):
                for item in v:
                    if isinstance(item, Parameter):
                        found[item.name] = item
                    elif isinstance(item, Module):
                        item._collect(found)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.value.shape}")
            p.value = v.copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.w = Parameter(uniform_init(rng, (n_in, n_out), n_in), f"{name}.w")
        self.b = Parameter(uniform_init(rng, (n_out,), n_in), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class MLP(Module):
    """Stack of linear layers with ELU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, name: str):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [Linear(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.elu(x)
        return x


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, name: str):
        self.table = Parameter(rng.normal(0.0, 1.0, size=(n, dim)), f"{name}.table")

    def __call__(self, ids) -> Tensor:
        return ops.embedding(self.table, ids)


@dataclass
class LstmLayer:
    """Gate weights for one layer; ``w`` is (input + hidden) x 4 * hidden."""

    w: Parameter
    b: Parameter

    @property
    def hidden_size(self) -> int:
        return self.b.shape[0] // 4


class LSTM(Module):
    """Stacked LSTM. Forget-gate bias starts at 1."""

    def __init__(self, n_in: int, hidden: int, n_layers: int, rng: np.random.Generator, name: str):
        if n_layers < 1:
            raise ValueError("LSTM needs at least one layer")
        self.hidden = hidden
        self.cells: list[Parameter] = []
        self.n_layers = n_layers
        for layer in range(n_layers):
            d = n_in if layer == 0 else hidden
            fan_in = d + hidden
            w = Parameter(uniform_init(rng, (d + hidden, 4 * hidden), fan_in), f"{name}.l{layer}.w")
            bias = uniform_init(rng, (4 * hidden,), fan_in)
            bias[hidden:2 * hidden] = 1.0
            b = Parameter(bias, f"{name}.l{layer}.b")
            self.cells.extend([w, b])

    def layer(self, k: int) -> LstmLayer:
        return LstmLayer(self.cells[2 * k], self.cells[2 * k + 1])

    def initial_state(self, batch: int, h0: Tensor | None = None):
        zeros = Tensor(np.zeros((batch, self.hidden)))
        h = [h0 if h0 is not None else zeros for _ in range(self.n_layers)]
        c = [zeros for _ in range(self.n_layers)]
        return h, c

    def step(self, x: Tensor, state, mask=None):
        """Advance every layer one step; returns (top output, new state)."""
        hs, cs = state
        new_h, new_c = [], []
        inp = x
        for k in range(self.n_layers):
            lay = self.layer(k)
            h, c = ops.lstm_cell(inp, hs[k], cs[k], lay.w, lay.b, mask)
            new_h.append(h)
            new_c.append(c)
            inp = h
        return inp, (new_h, new_c)

    def run(self, xs: list[Tensor], mask: np.ndarray | None = None, h0: Tensor | None = None):
        """Run over a time-major list of (B, D) inputs.

        Returns the list of top-layer outputs and the final state. Masked
        steps carry state forward, so the final state is each row's last
        valid step.
        """
        state = self.initial_state(xs[0].shape[0], h0)
        outs = []
        for t, x in enumerate(xs):
            out, state = self.step(x, state, None if mask is None else mask[:, t])
            outs.append(out)
        return outs, state

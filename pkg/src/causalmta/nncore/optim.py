from __future__ import annotations

import numpy as np

from .layers import Parameter


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for p in params:
            p.grad *= factor
    return total


class Adam:
    """Bias-corrected adaptive-moment optimizer. Zeroes gradients after each step."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad.fill(0.0)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(params: list[Parameter], state: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Functional form: one Adam update keyed on ``state`` (create it as ``{}``)."""
    opt = state.get("opt")
    if opt is None:
        opt = state["opt"] = Adam(params, lr, beta1, beta2, eps)
    opt.step()

"""Minimal reverse-mode differentiation core used by every model."""

from . import archive, ops
from .gradcheck import grad_check, param_grad_check
from .layers import LSTM, MLP, Embedding, Linear, LstmLayer, Module, Parameter
from .ops import (EPS_PROB, attention, concat, cross_entropy, elu, embedding, grl, linear, lstm_cell,
                  matmul, sigmoid, softmax, tanh)
from .optim import Adam, adam_step, clip_grad_norm
from .tensor import NumericError, Tape, Tensor, active_tape


def lstm_step(x_t, state, layer: LstmLayer):
    """Single-layer LSTM step; ``state`` is ``(h, c)``. Returns ``(h', c')``."""
    h, c = state
    return lstm_cell(x_t, h, c, layer.w, layer.b)


__all__ = [
    "Adam", "EPS_PROB", "Embedding", "LSTM", "Linear", "LstmLayer", "MLP", "Module", "NumericError",
    "Parameter", "Tape", "Tensor", "active_tape", "adam_step", "archive", "attention", "clip_grad_norm",
    "concat", "cross_entropy", "elu", "embedding", "grad_check", "grl", "linear", "lstm_cell",
    "lstm_step", "matmul", "ops", "param_grad_check", "sigmoid", "softmax", "tanh",
]

"""Dense layers, LSTM cells and small compositions of them."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autograd as ag
from .autograd import Parameter

ACTIVATIONS = ("tanh", "identity")


class Module:
    """Anything holding named parameters. Children are walked in attribute order."""

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_(self):
        for p in self.parameters():
            p.value = np.zeros_like(p.value)
        return self


class DenseLayer(Module):
    def __init__(self, n_in, n_out, activation="tanh", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if n_in < 1 or n_out < 1:
            raise ValueError("layer sizes must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_out, n_in)))
        self.bias = Parameter(rng.uniform(-bound, bound, n_out))
        self.activation = activation

    @property
    def n_in(self):
        return self.weight.value.shape[1]

    @property
    def n_out(self):
        return self.weight.value.shape[0]

    def __call__(self, x):
        return ag.dense(x, self.weight, self.bias, self.activation)


class Mlp(Module):
    """Stack of dense layers; hidden layers use tanh, the last is linear."""

    def __init__(self, sizes, rng=None, hidden_activation="tanh"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.layers = [
            DenseLayer(a, b, hidden_activation if i < len(sizes) - 2 else "identity", rng)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    @property
    def sizes(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class LstmCell(Module):
    """LSTM recurrence with gates stacked as (input, forget, candidate, output)."""

    def __init__(self, n_in, hidden, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        bound = 1.0 / np.sqrt(hidden)
        self.w_input = Parameter(rng.uniform(-bound, bound, (4 * hidden, n_in)))
        self.w_hidden = Parameter(rng.uniform(-bound, bound, (4 * hidden, hidden)))
        bias = rng.uniform(-bound, bound, 4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.bias = Parameter(bias)

    @property
    def hidden(self):
        return self.w_hidden.value.shape[1]

    @property
    def n_in(self):
        return self.w_input.value.shape[1]

    def step(self, x, h, c):
        """Advance one step; returns ``(h', c')``."""
        hc = ag.lstm_step(x, h, c, self.w_input, self.w_hidden, self.bias)
        n = self.hidden
        return hc[..., :n], hc[..., n:]

    def zeros(self, batch=None):
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return np.zeros(shape), np.zeros(shape)

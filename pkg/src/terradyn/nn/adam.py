from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Moment estimates for a fixed, ordered list of parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    # optional per-parameter multipliers on lr
    lr_scale: list | None = None


def adam_step(state, params, grads):
    """Apply one bias-corrected Adam update in place and return ``params``.

    ``params`` are :class:`Parameter` objects (their ``value`` is replaced);
    ``grads`` is a matching list of arrays.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64).reshape(p.value.shape)
        if g.shape != state.m[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k}")
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        lr = state.lr * (state.lr_scale[k] if state.lr_scale else 1.0)
        p.value = p.value - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return params

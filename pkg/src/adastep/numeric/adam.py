from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParameterSet


@dataclass
class AdamState:
    m: ParameterSet
    v: ParameterSet
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterSet, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(params: ParameterSet, grads: ParameterSet, state: AdamState,
              lr: float | None = None) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam descent step; returns new params and state.

    ``lr`` overrides ``state.lr`` for this step only (schedules).
    """
    if not params.same_shapes(grads) or not params.same_shapes(state.m):
        raise ValueError("params, grads and optimizer state must share names and shapes")
    if state.step < 0:
        raise ValueError("optimizer step counter must be non-negative")
    t = state.step + 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_params, new_m, new_v = ParameterSet(), ParameterSet(), ParameterSet()
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        new_params.add(name, p - update)
        new_m.add(name, m)
        new_v.add(name, v)
    return new_params, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)

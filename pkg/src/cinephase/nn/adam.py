from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import StateError
from .params import ParamStore


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place and clear the gradients.

    Every parameter must carry a gradient; a missing one raises
    :class:`StateError` before anything is modified.
    """
    missing = [name for name in params if params.grads[name] is None]
    if missing:
        raise StateError(f"no gradient for parameters: {', '.join(missing)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in params:
        p = params.values[name]
        g = params.grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    params.zero_grad()

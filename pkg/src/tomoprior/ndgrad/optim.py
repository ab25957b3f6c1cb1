"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update; parameters are updated in place.

    Returns ``(params, state)``. Updates run in each parameter's dtype so
    repeated runs from the same state are bitwise identical.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        dt = p.data.dtype.type
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        g = g.astype(p.data.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        mhat = m / dt(1 - b1**state.step)
        vhat = v / dt(1 - b2**state.step)
        p.data -= dt(state.lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
    return params, state

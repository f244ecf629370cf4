from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ParamStore


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam, in place. Parameters without a gradient are left alone."""
    for name, g in grads.items():
        if name not in params.trainable:
            raise KeyError(f"gradient for non-trainable or unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    params.version += 1
    return params, state

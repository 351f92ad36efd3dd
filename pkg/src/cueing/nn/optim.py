"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .params import ParamRegistry


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(registry: ParamRegistry, grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """Apply one Adam update in place; non-trainable parameters are skipped."""
    trainable = [p for p in registry if p.trainable]
    missing = [p.name for p in trainable if p.name not in grads]
    if missing:
        raise KeyError(f"no gradient for trainable parameter(s): {', '.join(missing)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in trainable:
        g = np.asarray(grads[p.name], dtype=p.value.dtype)
        if g.shape != p.value.shape:
            raise ValueError(f"gradient for {p.name} has shape {g.shape}, expected {p.value.shape}")
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.value -= update.astype(p.value.dtype, copy=False)
    return state

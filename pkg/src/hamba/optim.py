"""AdamW with decoupled weight decay over a ParamStore."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore


@dataclass
class OptimizerState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "weight_decay": self.weight_decay, "eps": self.eps, "step": self.step}


def adamw_step(store: ParamStore, state: OptimizerState) -> None:
    """One bias-corrected Adam update with decoupled decay; clears the gradients."""
    params = list(store.items())
    missing = [name for name, p in params if p.grad is None]
    if missing:
        raise ValueError(f"adamw_step: parameters without gradients: {missing[:5]}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params:
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    store.zero_grad()

"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    hp: AdamWConfig,
) -> AdamWState:
    """Update ``params`` in place and return the advanced ``state``.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """
    if set(params) != set(grads):
        raise ValueError("params and grads name different tensors")
    state.step += 1
    t = state.step
    bc1 = 1.0 - hp.beta1**t
    bc2 = 1.0 - hp.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"optimizer state shape {m.shape} does not match parameter {name} {p.shape}")
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + hp.eps)
        if hp.weight_decay:
            update = update + hp.weight_decay * p
        p -= (hp.lr * update).astype(p.dtype, copy=False)
    return state

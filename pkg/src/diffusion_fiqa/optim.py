"""Adam and exponential moving averages over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingError


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh arrays, leaves inputs untouched."""
    if set(grads) - set(params):
        raise ContractError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        if g is None:
            new_params[name], new_m[name], new_v[name] = p, m, v
            continue
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = (p - update).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, AdamState(step, new_m, new_v)


class Adam:
    """Stateful wrapper binding :func:`adam_step` to a module's parameter tensors."""

    def __init__(self, parameters: dict, lr: float = 8e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.parameters = parameters
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        params = {k: t.data for k, t in self.parameters.items()}
        grads = {k: t.grad for k, t in self.parameters.items() if t.grad is not None}
        new, self.state = adam_step(params, grads, self.state, self.lr, self.betas, self.eps)
        for k, t in self.parameters.items():
            t.data = new[k]

    def zero_grad(self) -> None:
        for t in self.parameters.values():
            t.zero_grad()


def ema_update(ema: dict[str, np.ndarray], live: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    """ema <- decay * ema + (1 - decay) * live, elementwise."""
    if not 0.0 <= decay < 1.0:
        raise ContractError(f"EMA decay must lie in [0, 1), got {decay}")
    if set(ema) != set(live):
        raise ContractError("EMA and live parameter sets differ")
    out = {}
    for name, e in ema.items():
        x = live[name]
        if decay == 0.0:
            out[name] = x.copy()
        else:
            out[name] = (decay * e + (1.0 - decay) * x).astype(e.dtype)
    return out

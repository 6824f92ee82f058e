"""Adam and the reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in sorted parameter-name order."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if grads.keys() != params.keys():
        missing = sorted(params.keys() ^ grads.keys())
        raise ValueError(f"gradient names do not match parameters: {missing[:5]}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    # keep the caller's insertion order
    order = list(params)
    return (
        {k: new_p[k] for k in order},
        replace(state, m={k: new_m[k] for k in order}, v={k: new_v[k] for k in order}, step=t),
    )


@dataclass
class ScheduleState:
    lr: float = 1e-4
    initial_lr: float = 1e-4
    best: float = math.inf
    counter: int = 0
    factor: float = 0.9
    patience: int = 5
    floor: float = 1e-7
    threshold: float = 1e-9

    @classmethod
    def starting_at(cls, lr: float) -> ScheduleState:
        return cls(lr=lr, initial_lr=lr)


def plateau_schedule(state: ScheduleState, val_loss: float) -> tuple[ScheduleState, bool]:
    """Advance one epoch; returns the new state and whether ``val_loss`` improved on the best."""
    if not math.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    if val_loss <= state.best - state.threshold:
        return replace(state, best=val_loss, counter=0), True
    counter = state.counter + 1
    if counter >= state.patience:
        return replace(state, lr=max(state.lr * state.factor, state.floor), counter=0), False
    return replace(state, counter=counter), False

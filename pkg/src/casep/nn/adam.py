"""Bias-corrected Adam over dicts of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericError(FloatingPointError):
    """Non-finite values reached the optimizer."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self):
        self.step = 0
        self.m.clear()
        self.v.clear()


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              lr: float | None = None) -> dict[str, np.ndarray]:
    """Update ``params`` in place and return them.

    Parameters without a gradient entry are left untouched. ``lr`` overrides
    ``state.lr`` for this step only (phase-dependent learning rates).
    """
    for k, g in grads.items():
        if k not in params:
            continue
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, param has {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    state.step += 1
    t = state.step
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, g in grads.items():
        if k not in params:
            continue
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params

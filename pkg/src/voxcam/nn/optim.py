from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied to ``params`` and ``state`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class ReduceLROnPlateau:
    """Halve the rate after ``patience`` epochs without validation-loss improvement.

    A reduction that would cross ``floor`` is skipped, so every step either
    keeps the rate or multiplies it by ``factor``.
    """

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 3, floor: float = 1e-5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.best = np.inf
        self.wait = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                if self.lr * self.factor >= self.floor:
                    self.lr *= self.factor
                self.wait = 0
        return self.lr

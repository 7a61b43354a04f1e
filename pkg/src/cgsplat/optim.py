"""Adam with per-row state splicing for clouds whose size changes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), 0)

    def take_rows(self, origin: np.ndarray) -> "AdamState":
        """Rows follow ``origin`` (source row per new row, -1 for fresh zero rows)."""
        origin = np.asarray(origin)
        m = np.zeros((len(origin),) + self.first_moment.shape[1:])
        v = np.zeros_like(m)
        src = origin >= 0
        m[src] = self.first_moment[origin[src]]
        v[src] = self.second_moment[origin[src]]
        return AdamState(m, v, self.step_count)


def adam_step(param, grad, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-15):
    """One bias-corrected Adam update; returns ``(new_param, new_state)``."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.first_moment.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, "
                         f"state {state.first_moment.shape}")
    bad = ~np.isfinite(grad)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise FloatingPointError(f"non-finite gradient entry at index {idx}")
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1 - beta1) * grad
    v = beta2 * state.second_moment + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


class Adam:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(self, params: dict[str, np.ndarray], lrs: dict[str, float], **hyper):
        self.lrs = dict(lrs)
        self.hyper = hyper
        self.states = {k: AdamState.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Update the groups present in ``grads``; groups without a gradient are left alone."""
        out = dict(params)
        for name, g in grads.items():
            out[name], self.states[name] = adam_step(params[name], g, self.states[name],
                                                     self.lrs[name], **self.hyper)
        return out

    def take_rows(self, origin: np.ndarray):
        self.states = {k: s.take_rows(origin) for k, s in self.states.items()}

    def row_counts(self) -> dict[str, int]:
        return {k: len(s.first_moment) for k, s in self.states.items()}

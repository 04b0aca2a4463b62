"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolation


class AdamState:
    """First/second moment buffers plus step counter for a parameter set."""

    def __init__(self, params: dict[str, Tensor],
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float):
    """One bias-corrected Adam update; missing gradients count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise ContractViolation(f"Adam state shape mismatch for {name}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractViolation(f"gradient shape mismatch for {name}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)

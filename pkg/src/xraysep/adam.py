"""ADAM with bias correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

DEFAULT_LR = 1e-4


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: Tensor, **kw) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **kw)


def adam_update(param: Tensor, grad: np.ndarray, state: AdamState, lr: float = DEFAULT_LR) -> Tensor:
    """One ADAM step. Rebinds ``param.data`` (never writes in place) and advances ``state``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    grad = np.asarray(grad)
    if grad.shape != param.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, "
                         f"moments {state.m.shape}/{state.v.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * (grad * grad)
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return param


class Adam:
    """Keeps one :class:`AdamState` per parameter and steps them together."""

    def __init__(self, params: list[Tensor], lr: float = DEFAULT_LR, **kw):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.states = [AdamState.zeros_like(p, **kw) for p in params]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_update(p, g, s, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

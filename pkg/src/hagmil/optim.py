from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(
    param: Tensor,
    grad: np.ndarray,
    state: AdamState,
    lr: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_opt: float = 1e-8,
    weight_decay: float = 1e-5,
) -> None:
    """Bias-corrected Adam with decoupled weight decay, applied in place."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape:
        raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {param.shape}")
    if state.m is None:
        state.m = np.zeros_like(param.data)
        state.v = np.zeros_like(param.data)
    elif state.m.shape != param.shape:
        raise ShapeError(f"adam_step: state shape {state.m.shape} != param shape {param.shape}")
    state.step_count += 1
    t = state.step_count
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1**t)
    v_hat = state.v / (1.0 - beta2**t)
    if weight_decay:
        param.data *= 1.0 - lr * weight_decay
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps_opt)


@dataclass
class Adam:
    """Adam over a fixed list of parameters; one :class:`AdamState` each."""

    params: list[Tensor]
    lr: float = 1e-5
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        if not self.states:
            self.states = [AdamState() for _ in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, st in zip(self.params, self.states):
            if p.grad is None:
                continue
            adam_step(p, p.grad, st, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

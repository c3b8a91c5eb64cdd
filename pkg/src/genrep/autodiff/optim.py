"""Adam with bias correction and the cosine learning-rate schedule."""

import math
from dataclasses import dataclass, field

import numpy as np


def cosine_lr(step, total_steps, base_lr):
    """``base_lr * 0.5 * (1 + cos(pi * step / total_steps))``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_step(params, grads, state, lr=None):
    """One in-place Adam update of ``params`` (tensors) from ``grads`` (arrays)."""
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class Adam:
    """Stateful wrapper pairing a parameter list with its :class:`AdamState`."""

    params: list
    lr: float = 1e-4
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.for_params(self.params, self.lr)

    def step(self, grads, lr=None):
        adam_step(self.params, grads, self.state, lr)

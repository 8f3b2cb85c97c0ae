"""Adam with bias correction and a cosine learning-rate schedule.

The update is the standard one:

    m_t = b1*m + (1-b1)*g        v_t = b2*v + (1-b2)*g^2
    theta -= lr * (m_t / (1-b1^t)) / (sqrt(v_t / (1-b2^t)) + eps)

State is kept in float32 alongside the parameters. Any non-finite gradient
aborts the step with :class:`NonFiniteError` naming the offending parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 (step 0) to 0 (step total_steps), clamped outside."""
    if total_steps <= 0:
        return lr0
    t = min(max(step, 0), total_steps) / total_steps
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name, plus step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Apply one Adam update in place to every parameter present in ``grads``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= np.float32(lr) * update.astype(np.float32)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"adam_step: non-finite parameter '{name}' after update")
    return state


class Adam:
    """Convenience wrapper: collects ``.grad`` from tensors, schedules the lr.

    ``total_steps`` fixes the cosine horizon; ``step()`` consumes and clears
    the gradients of all managed parameters.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 total_steps: int = 0, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = dict(params)
        self.lr0 = lr
        self.total_steps = total_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    @property
    def lr(self) -> float:
        return cosine_lr(self.state.step, self.total_steps, self.lr0)

    def step(self) -> float:
        """One update using current grads; returns the lr that was applied."""
        lr = self.lr
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, lr,
                  self.beta1, self.beta2, self.eps)
        self.zero_grad()
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

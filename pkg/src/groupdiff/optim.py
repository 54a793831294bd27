"""AdamW with decoupled weight decay.

The update for each parameter p with gradient g at step t (after
incrementing t) is:

    m = b1*m + (1-b1)*g
    v = b2*v + (1-b2)*g*g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)

which matches the reference decoupled-decay recurrence (decay uses the
pre-update parameter value).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, ValidationError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValidationError(f"betas must lie in [0, 1), got {self.betas}")


def adamw_update(params: list[np.ndarray], grads: list[np.ndarray],
                 state: OptimizerState) -> tuple[list[np.ndarray], OptimizerState]:
    """Apply one AdamW step in place; returns (params, state) for chaining."""
    if len(params) != len(grads):
        raise DimensionError("params and grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionError(f"param/grad shape mismatch at {i}: {p.shape} vs {g.shape}")
        if state.m[i].shape != p.shape:
            raise DimensionError(f"moment shape mismatch at {i}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i}")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay != 0.0:
            update = update + state.weight_decay * p
        p -= state.lr * update
    return params, state


class AdamW:
    """Holds OptimizerState for a fixed list of Tensors and steps them."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        grads = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                grads.append(np.zeros_like(p.data))
            else:
                grads.append(p.grad)
        adamw_update([p.data for p in self.params], grads, self.state)

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import NonFiniteGradientError
from .tensor import Tensor


def sgd_momentum_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocity: Sequence[np.ndarray],
    lr: float,
    momentum: float,
) -> tuple[Sequence[np.ndarray], Sequence[np.ndarray]]:
    """One heavy-ball step, in place: ``v <- momentum*v - lr*g``; ``p <- p + v``.

    All gradients are checked before anything is touched, so a non-finite
    gradient leaves parameters and velocities unchanged.
    """
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter #{i}; step refused")
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v -= lr * g
        p += v
    return params, velocity


class SGD:
    """Momentum SGD over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if self.weight_decay:
            grads = [g + self.weight_decay * p.data for g, p in zip(grads, self.params)]
        sgd_momentum_step([p.data for p in self.params], grads, self.velocity, self.lr, self.momentum)

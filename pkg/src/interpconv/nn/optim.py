"""SGD with classical momentum; updates happen in place for determinism."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def sgd_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocities: list[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """v <- momentum * v + g;  p <- p - lr * v.  Mutates params (and velocities)."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params vs {len(grads)} grads")
    if velocities is None:
        velocities = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        v *= momentum
        v += g
        p -= lr * v
    return params


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocities: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self._velocities is None:
            self._velocities = [np.zeros_like(p) for p in params]
        sgd_step(params, grads, self.lr, self.momentum, self._velocities)

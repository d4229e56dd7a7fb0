"""Momentum SGD with a step-decay learning-rate schedule.

The velocity absorbs the learning rate::

    v <- beta * v + lr * grad
    theta <- theta - v

and ``lr = base_lr * decay ** (epoch // period)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict

import numpy as np


@dataclass
class OptimizerState:
    """Velocity buffers plus schedule state of momentum SGD."""

    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    beta: float = 0.9
    base_lr: float = 0.001
    epoch: int = 0
    decay: float = 0.9
    period: int = 10

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], **kwargs) -> "OptimizerState":
        return cls(velocity={k: np.zeros_like(v) for k, v in params.items()}, **kwargs)

    @property
    def lr(self) -> float:
        return lr_at_epoch(self, self.epoch)

    def hyperparameters(self) -> dict:
        return {"beta": self.beta, "base_lr": self.base_lr, "epoch": self.epoch,
                "decay": self.decay, "period": self.period}


def lr_at_epoch(state: OptimizerState, epoch: int) -> float:
    """Scheduled learning rate for a zero-based ``epoch``.

    Evaluated exactly on the decimal values of ``base_lr`` and ``decay`` and
    rounded once, so ``0.001 * 0.9**2`` comes out as the float ``0.00081``.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    k = epoch // state.period
    exact = Fraction(repr(float(state.base_lr))) * Fraction(repr(float(state.decay))) ** k
    return float(exact)


def momentum_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                  state: OptimizerState, lr: float | None = None) -> None:
    """Apply one momentum update in place to ``params`` and ``state.velocity``.

    ``lr`` defaults to the scheduled rate of ``state.epoch``.
    """
    if lr is None:
        lr = state.lr
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {theta.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(theta)
        elif v.shape != theta.shape:
            raise ValueError(f"velocity shape {v.shape} does not match parameter {name!r} {theta.shape}")
        v *= state.beta
        v += lr * g
        theta -= v

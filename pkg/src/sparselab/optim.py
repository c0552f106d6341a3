"""Momentum SGD restricted to active (mask=1) weights, plus step LR decay."""
from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .nn import Network


@dataclass
class SgdState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)  # layer id -> weight velocity
    bias_velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def reset_velocity(self, layer_id: str, where: np.ndarray):
        v = self.velocity.get(layer_id)
        if v is not None:
            v[where] = 0.0


def sgd_step(net: Network, state: SgdState):
    """v <- beta*v + g + wd*w ; w <- w - lr*v, only where mask == 1.

    Masked positions keep weight and velocity at exactly zero.
    """
    if not net.params or any(p.grad is None for p in net.params.values()):
        raise RuntimeError("sgd_step called without populated gradients")
    beta, wd, lr = state.momentum, state.weight_decay, state.lr
    for i, p in net.params.items():
        v = state.velocity.get(p.layer_id)
        if v is None:
            v = state.velocity[p.layer_id] = np.zeros_like(p.weight)
        m = p.mask
        v[m] = beta * v[m] + p.grad[m] + wd * p.weight[m]
        v[~m] = 0.0
        p.weight[m] -= lr * v[m]
        p.weight[~m] = 0.0

        b, bg = net.biases[i], net.bias_grads[i]
        bv = state.bias_velocity.get(p.layer_id)
        if bv is None:
            bv = state.bias_velocity[p.layer_id] = np.zeros_like(b)
        bv *= beta
        bv += bg + wd * b
        b -= lr * bv


@dataclass(frozen=True)
class StepLR:
    base: float = 0.1
    drop_factor: float = 10.0
    drop_epochs: tuple = (80, 120)

    def __post_init__(self):
        drops = tuple(self.drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError("drop_epochs must be strictly increasing")
        object.__setattr__(self, "drop_epochs", drops)

    def __call__(self, epoch: int) -> float:
        return step_lr(self, epoch)


def step_lr(schedule: StepLR, epoch: int) -> float:
    drops = sum(1 for e in schedule.drop_epochs if e <= epoch)
    return schedule.base / schedule.drop_factor ** drops


def constant_lr(lr: float) -> StepLR:
    return StepLR(base=lr, drop_factor=1.0, drop_epochs=())


"""Momentum SGD with coupled L2 weight decay and a half-cosine learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import Model
from .tensor import GraphError, Tensor, backward_tensor, check_finite


@dataclass
class Optimizer:
    lr0: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0005
    final_lr_fraction: float = 0.25
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must lie in (0, 1]")


def lr_at(opt: Optimizer, t: float, total_steps: float) -> float:
    """lr0 * (f + (1 - f) * (1 + cos(pi t / T)) / 2), so lr(T) = f * lr0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    if t == total_steps:
        return opt.final_lr_fraction * opt.lr0
    f = opt.final_lr_fraction
    return opt.lr0 * (f + (1 - f) * 0.5 * (1 + math.cos(math.pi * t / total_steps)))


def backward(loss: Tensor, model: Model) -> dict:
    """Gradients of ``loss`` for every trainable parameter of ``model``.

    Parameters the loss does not reach get zero gradients. The model's
    ``.grad`` slots are cleared again before returning.
    """
    params = model.trainable()
    for p in params.values():
        p.grad = None
    try:
        backward_tensor(loss)
        grads = {}
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            check_finite(g, f"gradient of {name}")
            grads[name] = g
    finally:
        for p in params.values():
            p.grad = None
    return grads


def sgd_step(model: Model, grads: dict, opt: Optimizer, lr: float) -> None:
    """v <- momentum * v + (g + wd * p); p <- p - lr * v. BN scale/offset skip decay."""
    params = model.trainable()
    missing = set(params) - set(grads)
    if missing:
        raise GraphError(f"missing gradients for {sorted(missing)}")
    for name, p in params.items():
        g = grads[name]
        if opt.weight_decay and not model.decay_exempt(name):
            g = g + opt.weight_decay * p.data
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = opt.momentum * v + g
        opt.velocity[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)

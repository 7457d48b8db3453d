"""SGD with momentum and cosine decay, and Adam. Parameters are updated in place."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch


def cosine_lr(base_lr: float, t: int, total: int) -> float:
    """``base_lr * 0.5 * (1 + cos(pi * t / total))``; t is clipped to [0, total]."""
    if total <= 0:
        return base_lr
    t = min(max(t, 0), total)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total))


def _check(params, grads):
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ShapeMismatch(f"gradient for {k} has shape {grads[k].shape}, parameter {p.shape}")


@dataclass
class SGDState:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: SGDState, base_lr: float, t: int, total: int) -> float:
    """One momentum SGD step at cosine-scheduled position ``t`` of ``total``; returns the lr used."""
    _check(params, grads)
    lr = cosine_lr(base_lr, t, total)
    for k, p in params.items():
        g = grads[k] + state.weight_decay * p if state.weight_decay else grads[k]
        buf = state.buffers.get(k)
        buf = g.copy() if buf is None else state.momentum * buf + g
        state.buffers[k] = buf
        p -= lr * buf
    return lr


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    _check(params, grads)
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)

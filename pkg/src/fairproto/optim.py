"""Adam with bias correction, global gradient-norm clipping, and a cosine
annealing learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError
from .head import HeadParams


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        tensors = params.trainable() if isinstance(params, HeadParams) else params
        return cls(m={k: np.zeros_like(a) for k, a in tensors.items()},
                   v={k: np.zeros_like(a) for k, a in tensors.items()},
                   beta1=beta1, beta2=beta2, eps=eps)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0):
    """Scale the whole gradient set so its global L2 norm is at most
    ``max_norm``. Returns (grads, pre-clip norm); scaling is in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    pre = global_norm(grads)
    if pre > max_norm:
        scale = max_norm / pre
        for g in grads.values():
            g *= scale
    return grads, pre


def adam_step(state: AdamState, params, grads: dict[str, np.ndarray], lr: float):
    """One bias-corrected Adam update, in place. ``params`` may be a
    HeadParams or a plain dict of tensors keyed like ``grads``."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    tensors = params.trainable() if isinstance(params, HeadParams) else params
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for key, p in tensors.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter shape "
                             f"{p.shape} for {key}")
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class CosineSchedule:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    total_steps: int = 6250

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not (0 < self.lr_min <= self.lr_max):
            raise ValueError("need 0 < lr_min <= lr_max")


def cosine_lr(schedule: CosineSchedule, t: int) -> float:
    """lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2.

    Endpoints are returned exactly; t outside [0, T] is an error.
    """
    if t < 0 or t > schedule.total_steps:
        raise ValueError(f"step {t} outside schedule range [0, {schedule.total_steps}]")
    if t == 0:
        return schedule.lr_max
    if t == schedule.total_steps:
        return schedule.lr_min
    span = schedule.lr_max - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * t / schedule.total_steps))

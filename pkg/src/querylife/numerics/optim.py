"""AdamW with decoupled weight decay and a linear-warmup cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.05
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    clip_norm: float | None = None,
) -> float:
    """One in-place AdamW step over every parameter in ``params``.

    Returns the global gradient norm (before clipping, if ``clip_norm`` is set).
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {grads[name].shape} vs parameter {p.shape}")

    gnorm = math.sqrt(sum(float(np.vdot(grads[n], grads[n])) for n in params))
    coef = 1.0
    if clip_norm is not None and gnorm > clip_norm:
        coef = clip_norm / (gnorm + 1e-12)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name] * coef if coef != 1.0 else grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= (lr * (step + state.weight_decay * p.data)).astype(p.dtype, copy=False)
    return gnorm


@dataclass(frozen=True)
class LrSchedule:
    max_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.max_lr < 0:
            raise ValueError("max_lr must be non-negative")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def cosine_warmup_lr(t: int, s: LrSchedule) -> float:
    """Linear ramp to ``max_lr`` then half-cosine decay to zero.

    Steps past ``total_steps`` are clamped to the final value (0).
    """
    if t < 0:
        raise ValueError("step must be non-negative")
    t = min(t, s.total_steps)
    if t < s.warmup_steps:
        return s.max_lr * t / s.warmup_steps
    progress = (t - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

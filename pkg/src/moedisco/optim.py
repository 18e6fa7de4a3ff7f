"""AdamW with decoupled weight decay, and the two learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise DomainError(f"betas must lie in (0, 1), got {self.betas}")
        if self.eps <= 0:
            raise DomainError("eps must be positive")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be non-negative")
        if self.t < 0:
            raise DomainError("step counter must be non-negative")

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adamw_step(params, grads, state):
    """Apply one AdamW update in place.

    ``params`` and ``grads`` map parameter path -> array.  Parameters missing
    from ``grads`` (or with a ``None`` gradient) are treated as having zero
    gradient, which still moves them through weight decay and stale moments.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name!r}", path=name)
    b1, b2 = state.betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if g is not None:
            if g.shape != p.shape:
                raise DomainError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        else:
            m *= b1
            v *= b2
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "constant"
    peak_lr: float = 1e-4
    warmup_ratio: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise DomainError(f"unknown schedule kind {self.kind!r}")
        if self.peak_lr <= 0:
            raise DomainError("peak_lr must be positive")
        if not 0 <= self.warmup_ratio < 1:
            raise DomainError("warmup_ratio must lie in [0, 1)")
        if self.total_steps < 0:
            raise DomainError("total_steps must be non-negative")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_ratio * self.total_steps))


def lr_at(step: int, schedule: LrSchedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise DomainError(f"step {step} outside [0, {schedule.total_steps}]")
    peak = schedule.peak_lr
    if schedule.kind == "constant":
        return peak
    warm = schedule.warmup_steps
    if step < warm:
        return peak * step / warm
    span = schedule.total_steps - warm
    if span == 0:
        return peak
    return 0.5 * peak * (1.0 + math.cos(math.pi * (step - warm) / span))

"""AdamW, global-norm clipping and cosine interpolation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimState:
    """Per-parameter AdamW moments keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    def slot(self, name: str, like: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
            self.t[name] = 0
        return self.m[name], self.v[name]


def adamw_step(param: Tensor, grad: np.ndarray, state: OptimState, lr: float, wd: float,
               name: str | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place on ``param.data``."""
    if grad.shape != param.shape:
        raise ValueError(f"adamw_step: grad {grad.shape} vs param {param.shape}")
    if lr < 0 or wd < 0:
        raise ValueError("adamw_step: lr and wd must be non-negative")
    key = name if name is not None else (param.name or str(id(param)))
    m, v = state.slot(key, param.data)
    dt = param.data.dtype.type
    b1, b2 = state.beta1, state.beta2
    m *= dt(b1)
    m += dt(1.0 - b1) * grad
    v *= dt(b2)
    v += dt(1.0 - b2) * (grad * grad)
    state.t[key] += 1
    t = state.t[key]
    if lr == 0.0:
        return
    m_hat = m / dt(1.0 - b1**t)
    v_hat = v / dt(1.0 - b2**t)
    p = param.data
    if wd:
        p *= dt(1.0 - lr * wd)
    p -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))


_clamp_warned = False


def cosine_interp(base: float, final: float, t: float, T: float) -> float:
    """Half-cosine from ``base`` at t=0 to ``final`` at t=T; clamps past T."""
    global _clamp_warned
    if T <= 0:
        raise ValueError("cosine_interp: T must be positive")
    if t >= T:
        if t > T and not _clamp_warned:
            logger.warning("cosine_interp: t=%s beyond T=%s, clamping to final value", t, T)
            _clamp_warned = True
        return final
    if t <= 0:
        return base
    return final + (base - final) * (1.0 + math.cos(math.pi * t / T)) / 2.0


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
    return math.sqrt(total)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    if not max_norm > 0:
        raise ValueError("clip_global_norm: max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return [g * g.dtype.type(factor) for g in grads], norm

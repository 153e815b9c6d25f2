"""Adam with decoupled weight decay, Noam schedule, global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np

from srukit.exceptions import NonFiniteError, ParameterError


def noam_lr(step: int, warmup: int, d_model: int, factor: float) -> float:
    """``factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ParameterError(f"step must be >= 1, got {step}")
    if warmup < 1:
        raise ParameterError(f"warmup must be >= 1, got {warmup}")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    """First and second moments keyed by parameter name, plus the step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.items()},
                   v={k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              moments: AdamState, t: int, lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One in-place Adam update at step ``t`` (1-based).

    Weight decay shrinks each parameter by ``1 - lr * weight_decay`` before
    the moment update is applied.
    """
    if t < 1:
        raise ParameterError(f"Adam step index must be >= 1, got {t}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} at step {t}", step=t)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = moments.m.setdefault(name, np.zeros_like(p))
        v = moments.v.setdefault(name, np.zeros_like(p))
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    moments.t = t
    return moments


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grad_norm(grads: MutableMapping[str, np.ndarray], max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm

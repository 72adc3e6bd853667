"""Optimizers, learning-rate plans, gradient clipping and weight averaging.

All state is held in plain dataclasses keyed by parameter position; the
training loops own these objects exclusively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .numkit import Tensor2


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def _ensure(self, params: list[Tensor2]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params):
            raise ContractError("optimizer state does not match parameter list")


@dataclass
class EmaState:
    mu: float
    shadow: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_params(cls, params: list[Tensor2], mu: float) -> "EmaState":
        return cls(mu=mu, shadow=[p.data.copy() for p in params])


@dataclass
class LrPlan:
    base_lr: float
    min_lr: float
    warmup_start_lr: float
    warmup_epochs: int
    total_epochs: int

    def __post_init__(self):
        if not (0 < self.min_lr <= self.base_lr):
            raise ConfigError("require 0 < min_lr <= base_lr")
        if self.warmup_epochs >= self.total_epochs:
            raise ConfigError("warmup_epochs must be < total_epochs")


def _checked(params: list[Tensor2], grads: list[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ContractError("params/grads length mismatch")
    for p, g in zip(params, grads):
        if p.data.shape != g.shape:
            raise ContractError(
                f"param/grad shape mismatch: {p.data.shape} vs {g.shape}"
            )


def adam_step(
    params: list[Tensor2], grads: list[np.ndarray], state: AdamState, lr: float
) -> None:
    """Bias-corrected Adam update, in place."""
    if lr <= 0:
        raise ContractError("lr must be positive")
    _checked(params, grads)
    state._ensure(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def radam_step(
    params: list[Tensor2], grads: list[np.ndarray], state: AdamState, lr: float
) -> None:
    """Rectified Adam: variance-rectified adaptive step once the moving
    second moment is trustworthy, plain bias-corrected momentum before that."""
    if lr <= 0:
        raise ContractError("lr must be positive")
    _checked(params, grads)
    state._ensure(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    b2t = b2**t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        if rho_t > 4.0:
            v_hat = v / (1 - b2t)
            r_t = math.sqrt(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
            )
            p.data = p.data - lr * r_t * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            p.data = p.data - lr * m_hat


def lr_at(epoch: int, plan: LrPlan) -> float:
    """Linear warmup into cosine annealing, per-epoch granularity."""
    if epoch < 0 or epoch >= plan.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {plan.total_epochs})")
    if epoch < plan.warmup_epochs:
        frac = epoch / plan.warmup_epochs
        return plan.warmup_start_lr + (plan.base_lr - plan.warmup_start_lr) * frac
    span = plan.total_epochs - 1 - plan.warmup_epochs
    progress = 0.0 if span == 0 else (epoch - plan.warmup_epochs) / span
    return plan.min_lr + 0.5 * (plan.base_lr - plan.min_lr) * (
        1.0 + math.cos(math.pi * progress)
    )


def ema_update(ema: EmaState, params: list[Tensor2]) -> None:
    if len(ema.shadow) != len(params):
        raise ContractError("EMA shadow does not match parameter list")
    for s, p in zip(ema.shadow, params):
        if s.shape != p.data.shape:
            raise ContractError("EMA shadow shape mismatch")
        s *= ema.mu
        s += (1.0 - ema.mu) * p.data


def clip_grad_norm(
    grads: list[np.ndarray], max_norm: float
) -> tuple[list[np.ndarray], float]:
    """Global L2-norm clipping across all gradient tensors."""
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        grads = [g * factor for g in grads]
    return grads, total

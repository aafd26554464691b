"""AdamW with decoupled weight decay, cosine annealing, and gradient
accumulation over flat parameter vectors.

Decay is applied outside the adaptive update (lr * wd * theta subtracted
directly), so it regularizes weights rather than rescaling the gradient
moments. A decay mask lets callers exempt biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ScheduleError


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def init(cls, n_params: int, *, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8, weight_decay: float = 1e-2) -> "AdamWState":
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigError("betas must lie in [0, 1)")
        if eps <= 0.0:
            raise ConfigError("eps must be positive")
        if weight_decay < 0.0:
            raise ConfigError("weight_decay must be non-negative")
        return cls(np.zeros(n_params), np.zeros(n_params), 0, beta1, beta2, eps, weight_decay)


def adamw_step(params: np.ndarray, grad: np.ndarray, state: AdamWState, lr: float,
               decay_mask: np.ndarray | None = None) -> np.ndarray:
    """One update; returns new parameters and mutates ``state`` in place.

    Bias correction divides the raw moments; eps is added after the square
    root of the corrected second moment.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ConfigError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NumericError(f"non-finite gradient at index {bad[0]} (value {grad[bad[0]]!r})")
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    update = m_hat / (np.sqrt(v_hat) + state.eps)
    decayed = params if decay_mask is None else params * decay_mask
    if decay_mask is None:
        out = params - lr * update - lr * state.weight_decay * params
    else:
        out = params - lr * update - lr * state.weight_decay * decayed
    return out


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine annealing from lr_max down to lr_min over total_epochs."""

    lr_max: float
    lr_min: float
    total_epochs: int

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if self.lr_max <= 0.0 or self.lr_min < 0.0:
            raise ConfigError("learning rates must be positive (lr_min may be 0)")
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min must not exceed lr_max")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for epoch index in [0, total_epochs].

        Endpoints and the halfway point bypass the cosine evaluation so they
        come out exact: cos(0), cos(pi/2), and cos(pi) are exact in math but
        not in floating point.
        """
        if not 0 <= epoch <= self.total_epochs:
            raise ScheduleError(f"epoch {epoch} outside schedule range [0, {self.total_epochs}]")
        if epoch == 0:
            return self.lr_max
        if epoch == self.total_epochs:
            return self.lr_min
        if 2 * epoch == self.total_epochs:
            return 0.5 * (self.lr_max + self.lr_min)
        cos = math.cos(math.pi * epoch / self.total_epochs)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + cos)


@dataclass
class GradientAccumulator:
    """Collects micro-batch gradients, emits their arithmetic mean every
    ``steps`` additions. ``flush`` averages whatever is pending."""

    steps: int
    _sum: np.ndarray | None = field(default=None, repr=False)
    _count: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("accumulation steps must be >= 1")

    def add(self, grad: np.ndarray) -> np.ndarray | None:
        grad = np.asarray(grad, dtype=np.float64)
        if self._sum is None:
            self._sum = grad.copy()
        else:
            if grad.shape != self._sum.shape:
                raise ConfigError(f"gradient shape changed mid-accumulation: {grad.shape} vs {self._sum.shape}")
            self._sum += grad
        self._count += 1
        if self._count == self.steps:
            return self.flush()
        return None

    def flush(self) -> np.ndarray | None:
        if self._count == 0:
            return None
        out = self._sum / self._count
        self._sum = None
        self._count = 0
        return out

    @property
    def pending(self) -> int:
        return self._count

"""
Optimizers and learning-rate schedules over named numpy parameter arrays.

An optimizer instance owns its state (momentum buffers, Adam moments, step count), so
whoever holds the instance holds the state. Offload workers keep one instance per
adapter; the base device never sees it.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .helpers.errors import ConfigError

Params = Dict[str, np.ndarray]


class Schedule:
    """Multiplier applied to the base learning rate, indexed by optimizer step (0-based)."""

    def __call__(self, step: int) -> float:
        return 1.0


class CosineSchedule(Schedule):
    def __init__(self, total_steps: int) -> None:
        self.total_steps = max(1, total_steps)

    def __call__(self, step: int) -> float:
        return 0.5 * (1.0 + math.cos(math.pi * min(step, self.total_steps) / self.total_steps))


class LinearWarmupSchedule(Schedule):
    """Linear warmup over the first `warmup` fraction of steps, then linear decay to zero."""

    def __init__(self, total_steps: int, warmup: float = 0.05) -> None:
        self.total_steps = max(1, total_steps)
        self.warmup_steps = max(1, math.ceil(warmup * self.total_steps))

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return (step + 1) / self.warmup_steps
        remaining = self.total_steps - self.warmup_steps
        if remaining <= 0:
            return 1.0
        return max(0.0, (self.total_steps - step) / remaining)


class Optimizer:
    """
    Base optimizer.

    Subclasses implement `_update`, which returns new arrays; parameters passed in are
    never modified in place.
    """

    def __init__(self, lr: float, schedule: Optional[Schedule] = None) -> None:
        self.lr = lr
        self.schedule = schedule or Schedule()
        self.step_count = 0

    def current_lr(self) -> float:
        return self.lr * self.schedule(self.step_count)

    def step(self, params: Params, grads: Params) -> Params:
        """
        Apply one update.

        Args:
            params (Params): Current parameter arrays by name.
            grads (Params): Gradients with the same names and shapes.

        Returns:
            Params: Updated parameter arrays.
        """
        lr = self.current_lr()
        updated = {name: self._update(name, value, grads[name], lr) for name, value in params.items()}
        self.step_count += 1
        return updated

    def _update(self, name: str, value: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        raise NotImplementedError("Subclasses must implement the `_update` method.")


class SGD(Optimizer):
    def __init__(
        self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, schedule: Optional[Schedule] = None
    ) -> None:
        super().__init__(lr, schedule)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Params = {}

    def _update(self, name, value, grad, lr):
        if self.weight_decay:
            grad = grad + self.weight_decay * value
        if self.momentum:
            velocity = self.velocity.get(name)
            velocity = grad if velocity is None else self.momentum * velocity + grad
            self.velocity[name] = velocity
            grad = velocity
        return value - lr * grad


class AdamW(Optimizer):
    def __init__(
        self,
        lr: float = 3e-4,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 5e-4,
        schedule: Optional[Schedule] = None,
    ) -> None:
        super().__init__(lr, schedule)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.first_moment: Params = {}
        self.second_moment: Params = {}

    def _update(self, name, value, grad, lr):
        m = self.first_moment.get(name, np.zeros_like(value))
        v = self.second_moment.get(name, np.zeros_like(value))
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.first_moment[name] = m
        self.second_moment[name] = v
        t = self.step_count + 1
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return value - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * value)


@dataclass(frozen=True)
class OptimizerSpec:
    """Everything needed to build a fresh optimizer on whichever device owns the parameters."""

    name: str = 'sgd'
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = 'constant'
    total_steps: int = 1
    warmup: float = 0.05


def build_schedule(name: str, total_steps: int, warmup: float = 0.05) -> Schedule:
    schedules: Dict[str, Callable[[], Schedule]] = {
        'constant': Schedule,
        'cosine': lambda: CosineSchedule(total_steps),
        'linear': lambda: LinearWarmupSchedule(total_steps, warmup),
    }
    if name not in schedules:
        raise ConfigError(f"Unknown learning-rate schedule '{name}'.")
    return schedules[name]()


def build_optimizer(spec: OptimizerSpec) -> Optimizer:
    """
    Create an optimizer from its spec.

    Raises:
        ConfigError: If the optimizer or schedule name is unknown.
    """
    schedule = build_schedule(spec.schedule, spec.total_steps, spec.warmup)
    if spec.name == 'sgd':
        return SGD(spec.lr, momentum=spec.momentum, weight_decay=spec.weight_decay, schedule=schedule)
    if spec.name == 'adamw':
        return AdamW(spec.lr, weight_decay=spec.weight_decay, schedule=schedule)
    raise ConfigError(f"Unknown optimizer '{spec.name}'.")

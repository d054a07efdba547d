"""Adam, plateau-based learning-rate decay and gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with bias correction.

    Moments are kept in float64 regardless of parameter precision so that
    checkpoints restore them exactly.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def state_dict(self) -> dict:
        state = {f"adam.m.{i}": m for i, m in enumerate(self.m)}
        state.update({f"adam.v.{i}": v for i, v in enumerate(self.v)})
        return state

    def load_state_dict(self, state: dict, step_count: int, lr: float) -> None:
        for i in range(len(self.params)):
            self.m[i][...] = state[f"adam.m.{i}"]
            self.v[i][...] = state[f"adam.v.{i}"]
        self.step_count = step_count
        self.lr = lr


def adam_step(params: list[Tensor], state: Adam) -> None:
    """Functional spelling of :meth:`Adam.step` (``state`` holds the moments)."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("adam_step: parameter list does not match the optimizer state")
    state.step()


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once ``patience`` consecutive epochs
    pass without a strict decrease of the monitored metric.
    """

    lr: float = 1e-3
    factor: float = 0.1
    patience: int = 8
    min_lr: float = 1e-7
    best: float = math.inf
    num_bad_epochs: int = 0
    history: list[float] = field(default_factory=list)

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.num_bad_epochs = 0
        else:
            self.num_bad_epochs += 1
        if self.num_bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.num_bad_epochs = 0
        self.history.append(self.lr)
        return self.lr


def scheduler_step(sched: PlateauScheduler, val_metric: float, optimizer: Adam | None = None) -> float:
    lr = sched.step(val_metric)
    if optimizer is not None:
        optimizer.lr = lr
    return lr


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total

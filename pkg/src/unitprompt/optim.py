"""Training configuration and the Adam optimizer shared by every training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class TrainConfig:
    lr: float = 5e-3
    steps: int = 500
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    mode: str = "prompt_tune"  # prompt_tune | finetune_lm | pretrain
    eval_every: int = 0  # 0 -> once per pass over the training split
    patience: int = 5
    log_every: int = 0
    schedule: str = "constant"  # constant | linear (decay to zero at the last step)

    def __post_init__(self):
        if self.lr <= 0 or self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("lr, steps and batch_size must be positive")
        if self.mode not in ("prompt_tune", "finetune_lm", "pretrain"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.schedule == "linear":
            return self.lr * (1.0 - step / self.steps)
        return self.lr


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class Adam:
    params: Sequence[Tensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        sq = 0.0
        for p in self.params:
            if p.grad is not None:
                sq += float(np.dot(p.grad.reshape(-1).astype(np.float64), p.grad.reshape(-1).astype(np.float64)))
        return math.sqrt(sq)

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                g = np.zeros_like(p.values)
            else:
                g = p.grad * p.values.dtype.type(factor)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.values -= update.astype(p.values.dtype, copy=False)
        return norm

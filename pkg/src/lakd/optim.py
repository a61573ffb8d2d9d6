"""SGD with Nesterov momentum and L2 weight decay, plus a linear LR decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError(f"invalid optimizer settings {self}")


class SGD:
    """Momentum buffers are keyed by parameter position; parameters whose
    ``grad`` is None on a step are left untouched."""

    def __init__(self, params: Sequence[Tensor], config: OptimConfig = OptimConfig()):
        self.params = list(params)
        self.config = config
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        cfg = self.config
        lr = cfg.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
            if cfg.momentum:
                buf = self.buffers[i]
                buf = g.copy() if buf is None else cfg.momentum * buf + g
                self.buffers[i] = buf
                g = g + cfg.momentum * buf if cfg.nesterov else buf
            p.data = p.data - lr * g


def linear_decay(base_lr: float, step: int, total_steps: int) -> float:
    """Linearly from ``base_lr`` at step 0 toward 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return base_lr * max(0.0, 1.0 - step / total_steps)

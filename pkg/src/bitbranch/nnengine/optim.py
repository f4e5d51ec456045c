"""Adam with bias correction, decoupled weight decay, and linear lr decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bitbranch.nnengine.tensor import EngineError, Parameter


@dataclass
class TrainConfig:
    """Optimizer and schedule settings shared by both training stages."""

    lr0: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    weight_decay_stage1: float = 1e-5
    weight_decay_stage2: float = 0.0
    epochs_stage1: int = 2
    epochs_stage2: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.batch_size < 1:
            raise EngineError("lr0 must be positive and batch_size >= 1")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise EngineError("each stage needs at least one epoch")


def linear_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    """lr(t) = lr0 * (1 - t/T): linear decay reaching zero at t = T."""
    if not 0 <= epoch <= total_epochs:
        raise EngineError(f"epoch {epoch} outside schedule of {total_epochs}")
    return lr0 * (1.0 - epoch / total_epochs)


class Adam:
    """Standard Adam; weight decay is decoupled and applied only to
    parameters flagged ``decay`` (the latent real weights)."""

    def __init__(self, params: list[Parameter], cfg: TrainConfig, weight_decay: float = 0.0):
        self.params = [p for p in params if not p.frozen]
        self.cfg = cfg
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad_or_zero()
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= lr * mhat / (np.sqrt(vhat) + eps)
            if self.weight_decay and p.decay:
                p.data -= lr * self.weight_decay * p.data

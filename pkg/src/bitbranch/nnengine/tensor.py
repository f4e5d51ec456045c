"""Parameters and finite-value checking for the training core."""

from __future__ import annotations

import numpy as np


class EngineError(ValueError):
    """Raised for invalid shapes, modes, or missing tapes."""


class NanError(FloatingPointError):
    """Raised when training produces a non-finite value.

    Carries a human-readable location so the failure can be reported with
    context (the command-line driver maps this to its own exit code).
    """

    def __init__(self, where: str):
        super().__init__(f"non-finite value detected in {where}")
        self.where = where


class Parameter:
    """A trainable array with an accumulated gradient.

    ``decay`` marks latent real weights that receive decoupled weight
    decay; normalization scales, slopes, and gate variables leave it off.
    ``frozen`` parameters accept no gradient and are skipped by the
    optimizer.
    """

    def __init__(self, data: np.ndarray, name: str = "param",
                 decay: bool = False, frozen: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name
        self.decay = decay
        self.frozen = frozen

    @property
    def shape(self):
        return self.data.shape

    def add_grad(self, g: np.ndarray) -> None:
        if self.frozen:
            return
        g = np.asarray(g)
        if g.shape != self.data.shape:
            raise EngineError(
                f"gradient shape {g.shape} does not match {self.name} {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(np.float64, copy=True)
        else:
            self.grad += g

    def grad_or_zero(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = None


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NanError(where)
    return x

"""Plain SGD with classical momentum over named tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = ["SgdOptimizer"]


class SgdOptimizer:
    """v <- mu * v + g; x <- x - lr * v, with one velocity slot per tensor.

    Velocity buffers are keyed by parameter identity and created lazily at
    zero, so a tensor added between steps starts from rest.
    """

    def __init__(self, params, lr, momentum=0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if momentum < 0:
            raise ValueError(f"momentum must be nonnegative, got {momentum}")
        self.params = list(params)
        for p in self.params:
            if not isinstance(p, Tensor):
                raise TypeError(f"expected Tensor, got {type(p).__name__}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            v = self._velocity[id(p)]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def state_arrays(self):
        """Velocity buffers in parameter order, for checkpointing."""
        return [self._velocity[id(p)] for p in self.params]

    def load_state_arrays(self, arrays):
        if len(arrays) != len(self.params):
            raise ValueError(
                f"expected {len(self.params)} velocity arrays, got {len(arrays)}"
            )
        for p, a in zip(self.params, arrays):
            if a.shape != p.data.shape:
                raise ValueError(
                    f"velocity shape {a.shape} does not match parameter {p.data.shape}"
                )
            self._velocity[id(p)] = np.asarray(a, dtype=np.float64).copy()

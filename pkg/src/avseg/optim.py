"""Adam with decoupled weight decay over a parameter registry.

State is kept per parameter in registry order, so updates are deterministic
for a fixed sequence of gradients. Parameters whose grad is None at step time
are treated as having a zero gradient; decay still applies to them.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .layers import ParamRegistry

__all__ = ["AdamW"]


class AdamW:
    def __init__(
        self,
        registry: ParamRegistry,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr <= 0:
            raise ParameterError("lr must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ParameterError("betas must lie in [0, 1)")
        if eps <= 0 or weight_decay < 0:
            raise ParameterError("eps must be positive and weight_decay non-negative")
        self.registry = registry
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.values) for name, p in registry.items()}
        self._v = {name: np.zeros_like(p.values) for name, p in registry.items()}

    def step(self) -> None:
        """Apply one update from the currently accumulated gradients."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.registry.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.values -= self.lr * (update + self.weight_decay * p.values)

    def zero_grads(self) -> None:
        self.registry.zero_grads()

"""Adam with bias correction and decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = ["Adam", "GradientError"]


class GradientError(RuntimeError):
    """A parameter received a non-finite gradient; the step was aborted."""


class Adam:
    """Holds per-parameter moment accumulators and applies update steps.

    Parameters are a name -> Tensor mapping; moments share each parameter's
    shape.  Weight decay is decoupled (applied directly to the weights, not
    through the gradient).
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """One Adam update from the accumulated ``grad`` fields.

        Raises GradientError (before touching any parameter) if any gradient
        is non-finite.
        """
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g

        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

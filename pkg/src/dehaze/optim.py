"""Bias-corrected Adam and a cosine learning-rate schedule with warm restarts."""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .tensor import Tensor


class Adam:
    """Adam over a named parameter dict; parameters without grads are skipped.

    A non-finite gradient aborts the step naming the offending parameter --
    silent NaN propagation into moments is never worth it.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name!r} at step {self.step_count}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def cosine_lr(step: int, total_steps: int, lr_max: float = 2e-4, lr_min: float = 2e-6,
              cycles: int = 1) -> float:
    """Cosine annealing from lr_max to lr_min, optionally over several cycles.

    Endpoints are exact: lr(0) = lr_max and lr(total_steps) = lr_min; with
    cycles > 1 the rate snaps back to lr_max right after each cycle boundary.
    """
    if total_steps <= 0:
        return lr_min
    cycle_len = total_steps / max(1, int(cycles))
    frac = (step % cycle_len) / cycle_len
    if step != 0 and frac == 0.0:
        frac = 1.0
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * frac))

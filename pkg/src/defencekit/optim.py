"""Adam with bias correction, plus the segmentation learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["Adam", "lr_schedule"]


class Adam:
    """Bias-corrected Adam over a list of (name, parameter) pairs.

    theta <- theta - rate * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, named_params, rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.rate = rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the params.

        Parameters whose grad is unset are treated as zero-gradient (their
        moments decay but the value only moves if momentum is nonzero).
        """
        for name, p in self.named_params:
            g = p.grad
            if g is not None and not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.rate * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.m:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


def lr_schedule(epoch: int, base: float = 1e-3, halve_every: int = 25) -> float:
    """Step decay used for segmentation training: halve every quarter of the
    run (every 25 epochs of the standard 100-epoch budget)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * 0.5 ** (epoch // halve_every)

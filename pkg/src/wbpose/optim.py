"""Adam with an optional one-shot learning-rate decay."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_step: int | None = None   # first step index running at lr*factor
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.decay_factor <= 0:
            raise ShapeMismatch("lr, eps, and decay_factor must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ShapeMismatch("betas must lie in [0, 1)")
        if self.decay_step is not None and self.decay_step < 1:
            raise ShapeMismatch("decay_step must be >= 1")


class Adam:
    """Standard bias-corrected Adam over a fixed set of leaf tensors.

    A missing gradient freezes that parameter for the step, moments
    included, so partially-used graphs stay well-defined.
    """

    def __init__(self, params, cfg: AdamConfig | None = None):
        self.cfg = cfg if cfg is not None else AdamConfig()
        self.params = list(params.values()) if isinstance(params, dict) \
            else list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    @property
    def lr(self) -> float:
        c = self.cfg
        if c.decay_step is not None and self.t >= c.decay_step:
            return c.lr * c.decay_factor
        return c.lr

    def step(self):
        self.t += 1
        lr, c = self.lr, self.cfg
        c1 = 1.0 - c.beta1 ** self.t
        c2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + c.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

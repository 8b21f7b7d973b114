"""Adam with bias correction and the step learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .tensor import Tensor


class Adam:
    """Standard Adam. State lives in per-parameter first/second moment arrays.

    A parameter with ``grad is None`` is treated as having a zero gradient.
    """

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {lr}")
        self.params: list[Tensor] = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValidationError(
                    f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise ValidationError("optimizer state does not match parameter count")
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            if dst.shape != src.shape:
                raise ValidationError("optimizer moment shape mismatch")
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


class StepSchedule:
    """Learning rate ``base * factor ** (epoch // interval)``."""

    def __init__(self, base_lr: float, interval: int = 200, factor: float = 0.5):
        if base_lr <= 0:
            raise ValidationError(f"base learning rate must be positive, got {base_lr}")
        if interval < 1:
            raise ValidationError(f"schedule interval must be >= 1, got {interval}")
        if not 0 < factor <= 1:
            raise ValidationError(f"schedule factor must be in (0, 1], got {factor}")
        self.base_lr = float(base_lr)
        self.interval = int(interval)
        self.factor = float(factor)

    def __call__(self, epoch: int) -> float:
        return self.base_lr * self.factor ** (epoch // self.interval)

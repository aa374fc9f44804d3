from __future__ import annotations

import numpy as np

from .tensor import Tensor, UsageError


class AdamW:
    """Adam with decoupled weight decay.

    Decay multiplies parameters by ``1 - lr * weight_decay`` before the
    bias-corrected Adam step; it never touches the gradient or the moments.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        weight_decay: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UsageError(f"parameter {i} has no gradient; call backward first")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            p.data = p.data * (1.0 - self.lr * self.weight_decay)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise UsageError("optimizer state does not match parameter count")
        self.step_count = int(state["step"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]


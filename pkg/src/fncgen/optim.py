"""AdamW with decoupled weight decay, and the multistep learning-rate schedule."""

from __future__ import annotations

from decimal import Decimal
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


def lr_at(epoch: int, lr0: float, milestones: Sequence[int], gamma: float) -> float:
    """lr0 * gamma^(number of milestones <= epoch).

    Decay factors are decimal quantities ("reduce by 0.1"), so the product is
    evaluated in decimal and rounded once; chained binary multiplication would
    drift off values like 1e-6 by an ulp.
    """
    k = sum(1 for m in milestones if m <= epoch)
    if k == 0:
        return float(lr0)
    return float(Decimal(repr(lr0)) * Decimal(repr(gamma)) ** k)


class AdamW:
    """Bias-corrected Adam moments plus decoupled decay: p -= lr*(m_hat/(sqrt(v_hat)+eps) + wd*p)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """Apply one update to every parameter that has a gradient."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        for name in self.m:
            self.m[name] = np.asarray(state["m"][name], dtype=np.float64).reshape(self.m[name].shape)
            self.v[name] = np.asarray(state["v"][name], dtype=np.float64).reshape(self.v[name].shape)

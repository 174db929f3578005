"""Adam with coupled L2 weight decay and per-epoch cosine annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DimensionError, NumericError


def cosine_lr(lr_base, epoch, total_epochs, eta_min=0.0):
    """Learning rate at ``epoch`` of a cosine schedule with period ``total_epochs``."""
    if total_epochs <= 0:
        raise ConfigError("total_epochs must be positive")
    t = min(max(epoch, 0), total_epochs)
    return eta_min + 0.5 * (lr_base - eta_min) * (1.0 + math.cos(math.pi * t / total_epochs))


@dataclass
class AdamState:
    lr_base: float = 1e-3
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_epochs: int = 1
    eta_min: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_at(self, epoch):
        return cosine_lr(self.lr_base, epoch, self.total_epochs, self.eta_min)


class Adam:
    """Optimizer over a list of ``(name, Parameter)`` pairs."""

    def __init__(self, named_params, lr=1e-3, weight_decay=5e-5, total_epochs=1,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names handed to Adam")
        self.state = AdamState(lr, weight_decay, betas[0], betas[1], eps, total_epochs)
        for name, p in self.params:
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, epoch):
        """One update using the learning rate scheduled for ``epoch``.

        Raises :class:`NumericError` without touching any parameter when a
        gradient is non-finite.
        """
        st = self.state
        for name, p in self.params:
            if p.grad is not None:
                if p.grad.shape != p.shape:
                    raise DimensionError(f"gradient of {name} has shape {p.grad.shape}")
                if not np.isfinite(p.grad).all():
                    raise NumericError(f"non-finite gradient for {name}")
        lr = st.lr_at(epoch)
        st.step_count += 1
        t = st.step_count
        bc1 = 1.0 - st.beta1 ** t
        bc2 = 1.0 - st.beta2 ** t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64) + st.weight_decay * p.data.astype(np.float64)
            m = st.m[name]
            v = st.v[name]
            m[...] = st.beta1 * m + (1.0 - st.beta1) * g
            v[...] = st.beta2 * v + (1.0 - st.beta2) * g * g
            mhat = m.astype(np.float64) / bc1
            vhat = v.astype(np.float64) / bc2
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + st.eps)).astype(p.dtype)
        return lr

    def load_state(self, state):
        for name, _ in self.params:
            if name not in state.m or name not in state.v:
                raise ConfigError(f"optimizer state lacks moments for {name}")
        self.state = state

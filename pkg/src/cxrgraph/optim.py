"""In-place optimizers over a dict of numpy parameters."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in params:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGDMomentum:
    def __init__(self, params, lr=0.01, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        for k, g in grads.items():
            if k not in params:
                continue
            vel = self.velocity[k]
            vel *= self.momentum
            vel += g
            params[k] -= self.lr * vel


def make_optimizer(name: str, params, lr: float, momentum: float):
    if name == "adam":
        return Adam(params, lr=lr, beta1=momentum)
    if name == "sgd_momentum":
        return SGDMomentum(params, lr=lr, momentum=momentum)
    raise ValueError(f"unknown optimizer {name!r}; expected 'adam' or 'sgd_momentum'")

"""SGD and Adam optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update on numpy arrays; returns (new params, new state)."""
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("Adam state does not match the parameter shapes")
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


class Optimizer:
    def __init__(self, params):
        self.params = list(params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _grads(self):
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]


class SGD(Optimizer):
    def __init__(self, params, lr=1e-2):
        super().__init__(params)
        self.lr = lr

    def step(self):
        for p, g in zip(self.params, self._grads()):
            if p.requires_grad:
                p.data = p.data - self.lr * g


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self):
        live = [i for i, p in enumerate(self.params) if p.requires_grad]
        if not live:
            return
        if not self.state.m:
            self.state = AdamState(0, [np.zeros_like(p.data) for p in self.params],
                                   [np.zeros_like(p.data) for p in self.params])
        grads = self._grads()
        sub = AdamState(self.state.step, [self.state.m[i] for i in live], [self.state.v[i] for i in live])
        new_p, sub = adam_step([self.params[i].data for i in live], [grads[i] for i in live], sub,
                               self.lr, self.beta1, self.beta2, self.eps)
        for j, i in enumerate(live):
            self.params[i].data = new_p[j]
            self.state.m[i], self.state.v[i] = sub.m[j], sub.v[j]
        self.state.step = sub.step


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total

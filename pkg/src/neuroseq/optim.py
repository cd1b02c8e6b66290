"""AdamW with decoupled weight decay, plus reduce-on-plateau scheduling."""

from __future__ import annotations

import numpy as np

from .autodiff import NonFiniteError, Parameter


class AdamW:
    """AdamW: bias-corrected moments, weight decay applied directly to weights."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-3):
        self.params: list[Parameter] = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        for p in self.params:
            if p.m is None:
                p.m = np.zeros_like(p.data)
                p.v = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.m = b1 * p.m + (1.0 - b1) * g
            p.v = b2 * p.v + (1.0 - b2) * g * g
            mhat = p.m / bc1
            vhat = p.v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {
            "t": self.t,
            "lr": self.lr,
            "moments": {p.name: (p.m.copy(), p.v.copy()) for p in self.params},
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for p in self.params:
            m, v = state["moments"][p.name]
            p.m = np.asarray(m, dtype=np.float64).reshape(p.data.shape).copy()
            p.v = np.asarray(v, dtype=np.float64).reshape(p.data.shape).copy()


class ReduceLROnPlateau:
    """Halve the lr after ``patience`` consecutive epochs without a new best."""

    def __init__(self, optimizer: AdamW, factor=0.5, patience=10):
        self.optimizer = optimizer
        self.factor = float(factor)
        self.patience = int(patience)
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, metric: float):
        if metric < self.best:
            self.best = float(metric)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.optimizer.lr *= self.factor
                self.bad_epochs = 0
        return self.optimizer.lr

    def state_dict(self):
        return {"best": self.best, "bad_epochs": self.bad_epochs,
                "factor": self.factor, "patience": self.patience}

    def load_state_dict(self, state):
        self.best = float(state["best"])
        self.bad_epochs = int(state["bad_epochs"])
        self.factor = float(state["factor"])
        self.patience = int(state["patience"])

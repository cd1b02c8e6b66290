"""Finite-difference gradient checking for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, clear_tape


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    worst: tuple = ()  # (input index, flat element index, analytic, numeric)
    details: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def grad_check(f, inputs, tol: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    ``f`` must be deterministic; each input is a Tensor whose gradient is
    checked element-wise. Relative error uses |a - n| / max(|a| + |n|, 1e-6).
    """
    for x in inputs:
        x.requires_grad = True
        x._rec = True
        x.zero_grad()
    clear_tape()
    loss = f(*inputs)
    backward(loss)
    analytic = [
        np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs
    ]

    max_rel = 0.0
    worst = ()
    details = []
    for i, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            clear_tape()
            f_plus = float(f(*inputs).data)
            flat[j] = orig - h
            clear_tape()
            f_minus = float(f(*inputs).data)
            flat[j] = orig
            num[j] = (f_plus - f_minus) / (2.0 * h)
        clear_tape()
        ana = analytic[i].reshape(-1)
        rel = np.abs(ana - num) / np.maximum(np.abs(ana) + np.abs(num), 1e-6)
        k = int(rel.argmax()) if rel.size else 0
        if rel.size and rel[k] > max_rel:
            max_rel = float(rel[k])
            worst = (i, k, float(ana[k]), float(num[k]))
        details.append(float(rel.max()) if rel.size else 0.0)

    return GradCheckReport(
        max_rel_err=max_rel, tol=tol, passed=max_rel < tol, worst=worst, details=details
    )


def scalar_fn_on(params, fn):
    """Adapter: grad-check ``fn`` that closes over ``params`` (list of Tensors)."""
    return grad_check(lambda *xs: fn(), params)

"""Day-specific calibration of latent sequences.

Three interchangeable transforms sit between the front end and the
encoder: the gated hammer/scalpel blend (a per-day affine remix of latent
space combined with feature-wise modulation produced from a day
embedding), a plain per-day linear transform, and identity. All start as
exact pass-throughs so training begins from the uncalibrated model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, gelu, matmul, mul, scale, sigmoid, slice_rows
from .layers import Linear, Module


class CalibrationMissingError(KeyError):
    """No calibration parameters exist for the requested day."""


@dataclass
class DayCalConfig:
    mode: str = "nhs"          # nhs | linear | none
    embed_dim: int = 16
    scalpel_hidden: int = 32
    phi: str = "gelu"          # gelu | identity

    def validate(self):
        if self.mode not in ("nhs", "linear", "none"):
            raise ValueError(f"unknown day calibration mode {self.mode!r}")
        if self.phi not in ("gelu", "identity"):
            raise ValueError(f"unknown nonlinearity {self.phi!r}")
        return self


class NHSCalibration(Module):
    """Gated blend of per-day affine alignment and feature-wise modulation.

    hammer:  X_h = X W_d + 1 b_d^T          (W_d starts at identity)
    scalpel: X_s = X * gamma_d + beta_d     (gamma/beta from day embedding MLP,
                                             start at 1 / 0)
    blend:   phi(g_d X_h + (1 - g_d) X_s),  g_d = sigmoid(per-day logit)
    """

    def __init__(self, name: str, days, latent_dim: int, cfg: DayCalConfig,
                 rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg.validate()
        self.days = list(days)
        self.d = latent_dim
        self.hammer_w = {}
        self.hammer_b = {}
        self.embed = {}
        self.gate_logit = {}
        for day in self.days:
            self.hammer_w[day] = self.param(f"day{day}.w", np.eye(latent_dim))
            self.hammer_b[day] = self.param(f"day{day}.b", np.zeros(latent_dim))
            self.embed[day] = self.param(
                f"day{day}.embed", 0.1 * rng.standard_normal(cfg.embed_dim))
            self.gate_logit[day] = self.param(f"day{day}.gate", np.zeros(1))
        self.mlp_in = self.child(Linear(f"{name}.scalpel.in", cfg.embed_dim,
                                        cfg.scalpel_hidden, rng))
        # zero weights + [1,...,1,0,...,0] bias: gamma=1, beta=0 at step 0
        self.mlp_out = self.child(Linear(f"{name}.scalpel.out", cfg.scalpel_hidden,
                                         2 * latent_dim, rng, zero_init=True))
        self.mlp_out.b.data[:latent_dim] = 1.0

    def _check_day(self, day):
        if day not in self.hammer_w:
            raise CalibrationMissingError(
                f"no calibration for day {day}; known days: {self.days}")

    def film_params(self, day) -> tuple[Tensor, Tensor]:
        self._check_day(day)
        from .autodiff import reshape
        out = reshape(self.mlp_out(gelu(self.mlp_in(_row(self.embed[day])))),
                      (2 * self.d,))
        return slice_rows(out, 0, self.d), slice_rows(out, self.d, 2 * self.d)

    def gate(self, day) -> Tensor:
        self._check_day(day)
        return sigmoid(self.gate_logit[day])

    def __call__(self, x: Tensor, day) -> Tensor:
        self._check_day(day)
        x_h = add(matmul(x, self.hammer_w[day]), self.hammer_b[day])
        gamma, beta = self.film_params(day)
        x_s = add(mul(x, gamma), beta)
        g = self.gate(day)
        one_minus_g = add(scale(g, -1.0), Tensor(np.ones(1)))
        blended = add(mul(g, x_h), mul(one_minus_g, x_s))
        return gelu(blended) if self.cfg.phi == "gelu" else blended

    def params_per_day(self) -> int:
        d = self.d
        return d * d + d + self.cfg.embed_dim + 1


def _row(e):
    """View a vector parameter as a 1 x n row for the MLP."""
    from .autodiff import reshape
    return reshape(e, (1, e.data.shape[0]))


class LinearDayTransform(Module):
    """Per-day affine transform only: X W_d + 1 b_d^T."""

    def __init__(self, name: str, days, latent_dim: int,
                 rng: np.random.Generator | None = None):
        super().__init__(name)
        self.days = list(days)
        self.d = latent_dim
        self.w = {d: self.param(f"day{d}.w", np.eye(latent_dim)) for d in self.days}
        self.b = {d: self.param(f"day{d}.b", np.zeros(latent_dim)) for d in self.days}

    def __call__(self, x: Tensor, day) -> Tensor:
        if day not in self.w:
            raise CalibrationMissingError(
                f"no calibration for day {day}; known days: {self.days}")
        return add(matmul(x, self.w[day]), self.b[day])

    def params_per_day(self) -> int:
        return self.d * self.d + self.d


class IdentityCalibration(Module):
    """No day-specific transform."""

    def __init__(self, name: str):
        super().__init__(name)

    def __call__(self, x: Tensor, day) -> Tensor:
        return x

    def params_per_day(self) -> int:
        return 0


def build_daycal(name: str, mode: str, days, latent_dim: int, cfg: DayCalConfig,
                 rng: np.random.Generator):
    cfg.validate()
    if mode == "nhs":
        return NHSCalibration(name, days, latent_dim, cfg, rng)
    if mode == "linear":
        return LinearDayTransform(name, days, latent_dim, rng)
    return IdentityCalibration(name)

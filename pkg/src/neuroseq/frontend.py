"""Dual-branch convolutional front end with stride-4 downsampling.

Spike counts and band power run through separate conv stacks (GELU after
every layer, stride on the last layer), the branch outputs are
concatenated to the latent width, and a per-frame sigmoid gate reweights
latent channels by content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Tensor, conv1d, gelu, mul, sigmoid
from .layers import Ctx, Linear, Module


class InputTooShortError(ValueError):
    pass


@dataclass
class FrontEndConfig:
    conv_width: int = 32       # channels of the inner conv layers
    kernel_size: int = 5
    layers_per_branch: int = 2
    latent_dim: int = 64       # D, split evenly across the two branches
    stride: int = 4

    def validate(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.latent_dim % 2 != 0:
            raise ValueError("latent_dim must be even (two branches)")
        if self.layers_per_branch < 1:
            raise ValueError("need at least one conv layer per branch")
        return self


class ConvBranch(Module):
    def __init__(self, name: str, c_in: int, cfg: FrontEndConfig,
                 rng: np.random.Generator):
        super().__init__(name)
        half = cfg.latent_dim // 2
        self.kernels = []
        self.strides = []
        c_prev = c_in
        for i in range(cfg.layers_per_branch):
            last = i == cfg.layers_per_branch - 1
            c_out = half if last else cfg.conv_width
            k = rng.normal(0.0, 1.0 / np.sqrt(c_prev * cfg.kernel_size),
                           size=(c_out, c_prev, cfg.kernel_size))
            self.kernels.append(self.param(f"conv{i}", k))
            self.strides.append(cfg.stride if last else 1)
            c_prev = c_out

    def __call__(self, x: Tensor) -> Tensor:
        for k, s in zip(self.kernels, self.strides):
            x = gelu(conv1d(x, k, stride=s, padding="same"))
        return x


class FrontEnd(Module):
    """features (T, 2*channels) -> latent sequence (ceil(T/stride), D)."""

    def __init__(self, name: str, n_channels: int, cfg: FrontEndConfig,
                 rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg.validate()
        self.n_channels = n_channels
        self.spike = self.child(ConvBranch(f"{name}.spike", n_channels, cfg, rng))
        self.power = self.child(ConvBranch(f"{name}.power", n_channels, cfg, rng))
        self.gate = self.child(Linear(f"{name}.gate", cfg.latent_dim,
                                      cfg.latent_dim, rng))

    def __call__(self, features, ctx: Ctx) -> Tensor:
        """``features`` is (T, 2*channels): a plain array splits cheaply into
        branch inputs; a Tensor stays differentiable end-to-end."""
        from .autodiff import concat, slice_rows, transpose
        T, c = (features.data.shape if isinstance(features, Tensor)
                else features.shape)
        if c != 2 * self.n_channels:
            raise DimensionError(
                f"expected {2 * self.n_channels} feature columns, got {c}")
        if T < 1:
            raise InputTooShortError("trial has no frames")
        if isinstance(features, Tensor):
            cols = transpose(features, (1, 0))
            spk = transpose(slice_rows(cols, 0, self.n_channels), (1, 0))
            pwr = transpose(slice_rows(cols, self.n_channels,
                                       2 * self.n_channels), (1, 0))
        else:
            spk = Tensor(np.ascontiguousarray(features[:, :self.n_channels]))
            pwr = Tensor(np.ascontiguousarray(features[:, self.n_channels:]))
        lat = concat([self.spike(spk), self.power(pwr)], axis=1)
        return content_gate(lat, self.gate)

    def out_length(self, T: int) -> int:
        return -(-T // self.cfg.stride)


def content_gate(latents: Tensor, gate: Linear) -> Tensor:
    """Per-frame channel reweighting: out = latents * sigmoid(linear(latents))."""
    return mul(latents, sigmoid(gate(latents)))

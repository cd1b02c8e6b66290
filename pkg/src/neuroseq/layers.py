"""Neural-net building blocks on top of the autodiff engine.

Modules own named Parameters and build a fresh graph per forward call.
A ``Ctx`` carries train/eval mode, the dropout RNG and an optional
attention-capture dict so callers can pull head-averaged weights out of
any forward pass.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Parameter, Tensor, add, concat, dropout, gelu, layer_norm, linear, matmul,
    reshape, scale, sigmoid, softmax, transpose,
)

MASK_VALUE = -1e30


class Ctx:
    """Forward-pass context: training mode, dropout RNG, attention capture."""

    def __init__(self, train: bool = False, rng: np.random.Generator | None = None,
                 capture: dict | None = None):
        self.train = train
        self.rng = rng
        self.capture = capture

    def drop(self, x: Tensor, p: float) -> Tensor:
        if not self.train or p <= 0.0:
            return x
        if self.rng is None:
            raise ValueError("training forward pass needs a dropout RNG")
        return dropout(x, p, self.rng)

    def grab(self, key: str, weights: np.ndarray):
        if self.capture is not None:
            self.capture.setdefault(key, []).append(weights.copy())


EVAL_CTX = Ctx(train=False)


class Module:
    """Minimal parameter container with hierarchical names."""

    def __init__(self, name: str):
        self.name = name
        self._params: list[Parameter] = []
        self._children: list[Module] = []

    def param(self, suffix: str, data) -> Parameter:
        p = Parameter(np.asarray(data, dtype=np.float64), f"{self.name}.{suffix}")
        self._params.append(p)
        return p

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> list[Parameter]:
        out = list(self._params)
        for c in self._children:
            out.extend(c.parameters())
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def checksum(self) -> float:
        return float(sum(np.abs(p.data).sum() for p in self.parameters()))


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        super().__init__(name)
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim == 2:
            return linear(x, self.w, self.b)
        return add(matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, name: str, d: int, eps: float = 1e-5):
        super().__init__(name)
        self.gain = self.param("gain", np.ones(d))
        self.bias = self.param("bias", np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, name: str, n: int, d: int, rng: np.random.Generator):
        super().__init__(name)
        self.table = self.param("table", rng.normal(0.0, 0.02, size=(n, d)))

    def __call__(self, ids) -> Tensor:
        from .autodiff import embedding
        return embedding(self.table, ids)


_POS_CACHE: dict = {}


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    key = (length, d)
    if key not in _POS_CACHE:
        pos = np.arange(length)[:, None].astype(np.float64)
        i = np.arange(d // 2)[None, :].astype(np.float64)
        angle = pos / np.power(10000.0, 2.0 * i / d)
        pe = np.zeros((length, d))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        pe.setflags(write=False)
        _POS_CACHE[key] = pe
    return _POS_CACHE[key]


_MASK_CACHE: dict = {}


def causal_mask(n: int) -> np.ndarray:
    if n not in _MASK_CACHE:
        m = np.zeros((n, n))
        m[np.triu_indices(n, k=1)] = MASK_VALUE
        m.setflags(write=False)
        _MASK_CACHE[n] = m
    return _MASK_CACHE[n]


class MultiHeadAttention(Module):
    def __init__(self, name: str, d_model: int, n_heads: int,
                 rng: np.random.Generator, p_drop: float = 0.0):
        super().__init__(name)
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {n_heads}")
        self.h = n_heads
        self.dh = d_model // n_heads
        self.d = d_model
        self.p_drop = p_drop
        self.wq = self.child(Linear(f"{name}.wq", d_model, d_model, rng))
        self.wk = self.child(Linear(f"{name}.wk", d_model, d_model, rng))
        self.wv = self.child(Linear(f"{name}.wv", d_model, d_model, rng))
        self.wo = self.child(Linear(f"{name}.wo", d_model, d_model, rng))

    def _heads(self, x: Tensor, length: int) -> Tensor:
        return transpose(reshape(x, (length, self.h, self.dh)), (1, 0, 2))

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None,
                 ctx: Ctx, capture_key: str | None = None) -> Tensor:
        lq = q_in.data.shape[0]
        lk = kv_in.data.shape[0]
        q = self._heads(self.wq(q_in), lq)          # (H, Lq, dh)
        k = self._heads(self.wk(kv_in), lk)
        v = self._heads(self.wv(kv_in), lk)
        scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.dh))
        if mask is not None:
            scores = add(scores, Tensor(mask[None, :, :]))
        att = softmax(scores, axis=-1)              # (H, Lq, Lk)
        if capture_key is not None:
            ctx.grab(capture_key, att.data.mean(axis=0))
        att = ctx.drop(att, self.p_drop)
        mix = matmul(att, v)                        # (H, Lq, dh)
        merged = reshape(transpose(mix, (1, 0, 2)), (lq, self.d))
        return self.wo(merged)


class FeedForward(Module):
    def __init__(self, name: str, d_model: int, d_ff: int,
                 rng: np.random.Generator, p_drop: float = 0.0):
        super().__init__(name)
        self.up = self.child(Linear(f"{name}.up", d_model, d_ff, rng))
        self.down = self.child(Linear(f"{name}.down", d_ff, d_model, rng))
        self.p_drop = p_drop

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        return self.down(ctx.drop(gelu(self.up(x)), self.p_drop))


class EncoderLayer(Module):
    """Pre-norm Transformer encoder layer."""

    def __init__(self, name: str, d_model: int, n_heads: int, d_ff: int,
                 rng: np.random.Generator, p_drop: float):
        super().__init__(name)
        self.ln1 = self.child(LayerNorm(f"{name}.ln1", d_model))
        self.attn = self.child(MultiHeadAttention(f"{name}.attn", d_model,
                                                  n_heads, rng, p_drop))
        self.ln2 = self.child(LayerNorm(f"{name}.ln2", d_model))
        self.ffn = self.child(FeedForward(f"{name}.ffn", d_model, d_ff, rng, p_drop))
        self.p_drop = p_drop

    def __call__(self, x: Tensor, ctx: Ctx, capture_key: str | None) -> Tensor:
        h = self.ln1(x)
        x = add(x, ctx.drop(self.attn(h, h, None, ctx, capture_key), self.p_drop))
        x = add(x, ctx.drop(self.ffn(self.ln2(x), ctx), self.p_drop))
        return x


class DecoderLayer(Module):
    """Pre-norm Transformer decoder layer: causal self-attn, cross-attn, FFN."""

    def __init__(self, name: str, d_model: int, n_heads: int, d_ff: int,
                 rng: np.random.Generator, p_drop: float):
        super().__init__(name)
        self.ln1 = self.child(LayerNorm(f"{name}.ln1", d_model))
        self.self_attn = self.child(MultiHeadAttention(f"{name}.self", d_model,
                                                       n_heads, rng, p_drop))
        self.ln2 = self.child(LayerNorm(f"{name}.ln2", d_model))
        self.cross_attn = self.child(MultiHeadAttention(f"{name}.cross", d_model,
                                                        n_heads, rng, p_drop))
        self.ln3 = self.child(LayerNorm(f"{name}.ln3", d_model))
        self.ffn = self.child(FeedForward(f"{name}.ffn", d_model, d_ff, rng, p_drop))
        self.p_drop = p_drop

    def __call__(self, x: Tensor, enc: Tensor, mask: np.ndarray, ctx: Ctx,
                 self_key: str | None, cross_key: str | None) -> Tensor:
        h = self.ln1(x)
        x = add(x, ctx.drop(self.self_attn(h, h, mask, ctx, self_key), self.p_drop))
        x = add(x, ctx.drop(
            self.cross_attn(self.ln2(x), enc, None, ctx, cross_key), self.p_drop))
        x = add(x, ctx.drop(self.ffn(self.ln3(x), ctx), self.p_drop))
        return x

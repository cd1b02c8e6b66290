"""GRU encoder trained with a CTC objective, as the recurrent baseline.

The CTC loss is a single differentiable primitive: the forward pass runs
the log-space alpha recursion over the blank-augmented target, the
backward pass uses the alpha-beta posterior. ``ctc_greedy_decode``
implements the usual collapse-repeats-then-drop-blanks rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor, _record, _accum, add, log_softmax, matmul, mul, sigmoid, sub, tanh,
)
from .layers import Ctx, Linear, Module

NEG_INF = -np.inf


class InfeasibleAlignmentError(ValueError):
    """Target cannot be aligned to the given number of frames."""


@dataclass
class CTCConfig:
    hidden: int = 128
    layers: int = 2
    bidirectional: bool = False


def min_frames(targets, blank: int) -> int:
    """Frames needed to emit ``targets``: |y| plus blanks between repeats."""
    t = [int(x) for x in targets]
    repeats = sum(1 for a, b in zip(t, t[1:]) if a == b)
    return len(t) + repeats


def _augment(targets, blank: int):
    labels = [blank]
    for t in targets:
        labels.extend((int(t), blank))
    return np.asarray(labels, dtype=np.int64)


def _logsumexp3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_loss(log_probs: Tensor, targets, blank: int) -> Tensor:
    """Negative log marginal probability of ``targets`` over all alignments.

    ``log_probs`` is (L, V), already log-softmaxed over V; ``targets`` must
    not contain the blank id.
    """
    lp = log_probs.data
    L, V = lp.shape
    targets = [int(t) for t in targets]
    if any(t == blank for t in targets):
        raise ValueError("CTC targets must not contain the blank id")
    if any(not 0 <= t < V for t in targets):
        raise ValueError("CTC target id out of range")
    need = min_frames(targets, blank)
    if L < need:
        raise InfeasibleAlignmentError(
            f"{L} frames cannot align a target needing {need}")

    labels = _augment(targets, blank)
    S = labels.size
    allow_skip = np.zeros(S, dtype=bool)
    if S > 2:
        allow_skip[2:] = (labels[2:] != blank) & (labels[2:] != labels[:-2])

    alpha = np.full((L, S), NEG_INF)
    alpha[0, 0] = lp[0, labels[0]]
    if S > 1:
        alpha[0, 1] = lp[0, labels[1]]
    for t in range(1, L):
        prev = alpha[t - 1]
        stay = prev
        step = np.full(S, NEG_INF)
        step[1:] = prev[:-1]
        skip = np.full(S, NEG_INF)
        if S > 2:
            skip[2:] = np.where(allow_skip[2:], prev[:-2], NEG_INF)
        alpha[t] = lp[t, labels] + _logsumexp3(stay, step, skip)

    log_p = alpha[L - 1, S - 1]
    if S > 1:
        log_p = np.logaddexp(log_p, alpha[L - 1, S - 2])
    out = Tensor(-log_p)

    def bw(g):
        if not log_probs._rec:
            return
        beta = np.full((L, S), NEG_INF)
        beta[L - 1, S - 1] = lp[L - 1, labels[S - 1]]
        if S > 1:
            beta[L - 1, S - 2] = lp[L - 1, labels[S - 2]]
        for t in range(L - 2, -1, -1):
            nxt = beta[t + 1]
            stay = nxt
            step = np.full(S, NEG_INF)
            step[:-1] = nxt[1:]
            skip = np.full(S, NEG_INF)
            if S > 2:
                # s -> s+2 is legal exactly when the skip into s+2 is
                skip[:-2] = np.where(allow_skip[2:], nxt[2:], NEG_INF)
            beta[t] = lp[t, labels] + _logsumexp3(stay, step, skip)

        # posterior over augmented states; lp counted once per (t, s)
        gamma = alpha + beta - lp[:, labels]
        grad = np.zeros_like(lp)
        post = np.exp(gamma - log_p)
        for s in range(S):
            grad[:, labels[s]] -= post[:, s]
        _accum(log_probs, grad * float(g))

    return _record(out, (log_probs,), bw)


def ctc_greedy_decode(log_probs: np.ndarray, blank: int) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    path = np.asarray(log_probs).argmax(axis=1)
    out: list[int] = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


class GRULayer(Module):
    """Single-direction GRU (update/reset gates, candidate via tanh)."""

    def __init__(self, name: str, d_in: int, d_hidden: int,
                 rng: np.random.Generator):
        super().__init__(name)
        self.h = d_hidden
        s_in = 1.0 / np.sqrt(d_in)
        s_h = 1.0 / np.sqrt(d_hidden)
        self.w_ir = self.param("w_ir", rng.normal(0, s_in, (d_in, d_hidden)))
        self.w_iz = self.param("w_iz", rng.normal(0, s_in, (d_in, d_hidden)))
        self.w_in = self.param("w_in", rng.normal(0, s_in, (d_in, d_hidden)))
        self.w_hr = self.param("w_hr", rng.normal(0, s_h, (d_hidden, d_hidden)))
        self.w_hz = self.param("w_hz", rng.normal(0, s_h, (d_hidden, d_hidden)))
        self.w_hn = self.param("w_hn", rng.normal(0, s_h, (d_hidden, d_hidden)))
        self.b_r = self.param("b_r", np.zeros(d_hidden))
        self.b_z = self.param("b_z", np.zeros(d_hidden))
        self.b_n = self.param("b_n", np.zeros(d_hidden))

    def __call__(self, x: Tensor) -> Tensor:
        from .autodiff import concat, slice_rows
        L = x.data.shape[0]
        xr = add(matmul(x, self.w_ir), self.b_r)
        xz = add(matmul(x, self.w_iz), self.b_z)
        xn = add(matmul(x, self.w_in), self.b_n)
        h = Tensor(np.zeros((1, self.h)))
        outs = []
        for t in range(L):
            r = sigmoid(add(slice_rows(xr, t, t + 1), matmul(h, self.w_hr)))
            z = sigmoid(add(slice_rows(xz, t, t + 1), matmul(h, self.w_hz)))
            n = tanh(add(slice_rows(xn, t, t + 1), mul(r, matmul(h, self.w_hn))))
            h = add(n, mul(z, sub(h, n)))  # (1-z)*n + z*h
            outs.append(h)
        return concat(outs, axis=0)


def flip_rows(x: Tensor) -> Tensor:
    out = Tensor(x.data[::-1].copy())

    def bw(g):
        _accum(x, g[::-1])

    return _record(out, (x,), bw)


class GRUStack(Module):
    def __init__(self, name: str, d_in: int, cfg: CTCConfig,
                 rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg
        self.fwd = []
        self.bwd = []
        d = d_in
        for i in range(cfg.layers):
            self.fwd.append(self.child(GRULayer(f"{name}.f{i}", d, cfg.hidden, rng)))
            if cfg.bidirectional:
                self.bwd.append(self.child(GRULayer(f"{name}.b{i}", d,
                                                    cfg.hidden, rng)))
            d = cfg.hidden * (2 if cfg.bidirectional else 1)
        self.out_dim = d

    def __call__(self, x: Tensor) -> Tensor:
        from .autodiff import concat
        for i in range(self.cfg.layers):
            f = self.fwd[i](x)
            if self.cfg.bidirectional:
                b = flip_rows(self.bwd[i](flip_rows(x)))
                x = concat([f, b], axis=1)
            else:
                x = f
        return x


class CTCBaseline(Module):
    """Same front end and day transform as the seq2seq model, GRU encoder,
    linear readout over phonemes + blank. The word decoder (when attached)
    is the seq2seq decoder class cross-attending to projected GRU states."""

    def __init__(self, dataset, model_cfg, ctc_cfg: CTCConfig | None = None,
                 frontend_cfg=None, daycal_cfg=None, daycal_mode: str = "nhs",
                 with_word_decoder: bool = False, with_mfcc_head: bool = True):
        from .daycal import DayCalConfig, build_daycal
        from .frontend import FrontEnd, FrontEndConfig
        from .seq2seq import TransformerDecoder
        from .synthdata import MFCC_DIM

        super().__init__("ctc")
        self.cfg = model_cfg.validate()
        self.ctc_cfg = ctc_cfg or CTCConfig()
        fe_cfg = frontend_cfg or FrontEndConfig(latent_dim=model_cfg.d_model)
        dc_cfg = daycal_cfg or DayCalConfig(mode=daycal_mode)
        rng = np.random.default_rng(model_cfg.seed)
        self.pvocab = dataset.phoneme_vocab
        self.wvocab = dataset.word_vocab
        self.blank_id = self.pvocab.blank_id
        self.daycal_mode = daycal_mode
        self.frontend = self.child(FrontEnd("frontend", dataset.n_channels,
                                            fe_cfg, rng))
        self.daycal = self.child(build_daycal("daycal", daycal_mode, dataset.days,
                                              fe_cfg.latent_dim, dc_cfg, rng))
        self.gru = self.child(GRUStack("gru", fe_cfg.latent_dim, self.ctc_cfg, rng))
        self.readout = self.child(Linear("readout", self.gru.out_dim,
                                         self.pvocab.size, rng))
        self.word_decoder = None
        self.word_proj = None
        self.mfcc_head = None
        if with_word_decoder:
            self.word_proj = self.child(Linear("word_proj", self.gru.out_dim,
                                               model_cfg.d_model, rng))
            self.word_decoder = self.child(TransformerDecoder(
                "worddec", self.wvocab.size, model_cfg.word_decoder_layers,
                model_cfg, rng))
        if with_mfcc_head:
            self.mfcc_head = self.child(Linear("mfcc_head", self.gru.out_dim,
                                               MFCC_DIM, rng))

    def states(self, features, day: int, ctx: Ctx) -> Tensor:
        lat = self.frontend(features, ctx)
        return self.gru(self.daycal(lat, day))

    def logits(self, states: Tensor) -> Tensor:
        return self.readout(states)

    def log_probs(self, features: np.ndarray, day: int, ctx: Ctx) -> Tensor:
        return log_softmax(self.logits(self.states(features, day, ctx)), axis=-1)

    def loss(self, features: np.ndarray, day: int, targets, ctx: Ctx) -> Tensor:
        return ctc_loss(self.log_probs(features, day, ctx), targets, self.blank_id)

    def greedy_phonemes(self, features: np.ndarray, day: int) -> list[int]:
        from .autodiff import no_grad
        with no_grad():
            lp = self.log_probs(features, day, Ctx(train=False)).data
        return ctc_greedy_decode(lp, self.blank_id)

    def word_states(self, features: np.ndarray, day: int, ctx: Ctx) -> Tensor:
        if self.word_proj is None:
            raise ValueError("baseline has no word decoder")
        return self.word_proj(self.states(features, day, ctx))

    def mfcc_loss(self, states: Tensor, mfcc_targets: np.ndarray) -> Tensor:
        from .autodiff import mse, slice_rows
        from .seq2seq import pool_rows
        if self.mfcc_head is None:
            raise ValueError("baseline has no MFCC head")
        pooled = pool_rows(mfcc_targets, self.frontend.cfg.stride)
        n = min(states.data.shape[0], pooled.shape[0])
        return mse(self.mfcc_head(slice_rows(states, 0, n)), pooled[:n])

    def graph_audit(self) -> dict:
        audit = {"frontend": type(self.frontend), "daycal": type(self.daycal),
                 "encoder": type(self.gru), "readout": type(self.readout)}
        if self.word_decoder is not None:
            audit["word_decoder"] = type(self.word_decoder)
        return audit

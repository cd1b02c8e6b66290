"""Multitask Transformer: encoder, phoneme/word decoders, MFCC head.

The encoder consumes the calibrated latent sequence; an autoregressive
decoder emits phonemes, a second decoder emits words, and a linear head
regresses MFCC targets from an intermediate encoder layer during stage 1.
Attention maps from every sublayer can be captured on any forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, cross_entropy, mse, no_grad
from .daycal import DayCalConfig, build_daycal
from .frontend import FrontEnd, FrontEndConfig
from .layers import (
    Ctx, DecoderLayer, Embedding, EncoderLayer, LayerNorm, Linear, Module,
    causal_mask, sinusoidal_positions,
)
from .synthdata import Dataset, MFCC_DIM


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    phoneme_decoder_layers: int = 2
    word_decoder_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.4
    mfcc_tap_index: int = 1     # encoder layer whose output feeds the MFCC head
    freeze_word_layers: int = 0
    seed: int = 0

    def validate(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not (0 <= self.mfcc_tap_index < self.encoder_layers):
            raise ValueError("mfcc_tap_index must be < encoder_layers")
        if not (0 <= self.freeze_word_layers <= self.word_decoder_layers):
            raise ValueError("freeze_word_layers out of range")
        return self


@dataclass
class AttentionBundle:
    """Head-averaged attention maps from one forward pass (rows sum to 1)."""

    encoder_self: list = field(default_factory=list)    # per layer, (L, L)
    phoneme_self: list = field(default_factory=list)    # per layer, (L_ph, L_ph)
    phoneme_cross: list = field(default_factory=list)   # per layer, (L_ph, L)
    word_self: list = field(default_factory=list)       # per layer, (L_w, L_w)
    word_cross: list = field(default_factory=list)      # per layer, (L_w, L)

    def named_maps(self):
        for group in ("encoder_self", "phoneme_self", "phoneme_cross",
                      "word_self", "word_cross"):
            for i, m in enumerate(getattr(self, group)):
                yield f"{group}_layer{i}", m


class TransformerEncoder(Module):
    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg
        self.layers = [self.child(EncoderLayer(f"{name}.l{i}", cfg.d_model,
                                               cfg.n_heads, cfg.ffn_dim, rng,
                                               cfg.dropout))
                       for i in range(cfg.encoder_layers)]
        self.final_ln = self.child(LayerNorm(f"{name}.ln", cfg.d_model))

    def __call__(self, x: Tensor, ctx: Ctx, use_positions: bool = True):
        L = x.data.shape[0]
        if use_positions:
            x = add(x, Tensor(sinusoidal_positions(L, self.cfg.d_model)))
        x = ctx.drop(x, self.cfg.dropout)
        layer_states = []
        for i, layer in enumerate(self.layers):
            x = layer(x, ctx, f"{self.name}.self.l{i}")
            layer_states.append(x)
        return self.final_ln(x), layer_states


class TransformerDecoder(Module):
    """Autoregressive decoder over a token vocabulary, cross-attending to
    encoder states. Layer 0..k-1 can be frozen (excluded from training)."""

    def __init__(self, name: str, vocab_size: int, n_layers: int,
                 cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = self.child(Embedding(f"{name}.embed", vocab_size,
                                          cfg.d_model, rng))
        self.layers = [self.child(DecoderLayer(f"{name}.l{i}", cfg.d_model,
                                               cfg.n_heads, cfg.ffn_dim, rng,
                                               cfg.dropout))
                       for i in range(n_layers)]
        self.final_ln = self.child(LayerNorm(f"{name}.ln", cfg.d_model))
        self.out = self.child(Linear(f"{name}.out", cfg.d_model, vocab_size, rng))

    def __call__(self, enc: Tensor, tokens_in, ctx: Ctx) -> Tensor:
        tokens_in = np.asarray(tokens_in, dtype=np.int64)
        n = tokens_in.shape[0]
        x = add(self.embed(tokens_in), Tensor(sinusoidal_positions(n, self.cfg.d_model)))
        x = ctx.drop(x, self.cfg.dropout)
        mask = causal_mask(n)
        for i, layer in enumerate(self.layers):
            x = layer(x, enc, mask, ctx,
                      f"{self.name}.self.l{i}", f"{self.name}.cross.l{i}")
        return self.out(self.final_ln(x))

    def step_logprobs(self, enc: Tensor, prefix) -> np.ndarray:
        """Log-probabilities of the next token after ``prefix`` (no cache)."""
        logits = self(enc, prefix, Ctx(train=False)).data[-1]
        z = logits - logits.max()
        return z - np.log(np.exp(z).sum())

    def layer_param_names(self, k: int) -> set:
        names = set()
        for layer in self.layers[:k]:
            names.update(p.name for p in layer.parameters())
        return names


class SpeechSeq2Seq(Module):
    """Front end + day calibration + encoder + task heads for one corpus."""

    def __init__(self, dataset: Dataset, model_cfg: ModelConfig,
                 frontend_cfg: FrontEndConfig | None = None,
                 daycal_cfg: DayCalConfig | None = None,
                 daycal_mode: str = "nhs", with_word_decoder: bool = False,
                 with_mfcc_head: bool = True):
        super().__init__("seq2seq")
        self.cfg = model_cfg.validate()
        fe_cfg = frontend_cfg or FrontEndConfig(latent_dim=model_cfg.d_model)
        if fe_cfg.latent_dim != model_cfg.d_model:
            raise ValueError("front-end latent_dim must equal d_model")
        dc_cfg = daycal_cfg or DayCalConfig(mode=daycal_mode)
        rng = np.random.default_rng(model_cfg.seed)
        self.pvocab = dataset.phoneme_vocab
        self.wvocab = dataset.word_vocab
        self.daycal_mode = daycal_mode
        self.frontend = self.child(FrontEnd("frontend", dataset.n_channels,
                                            fe_cfg, rng))
        self.daycal = self.child(build_daycal("daycal", daycal_mode, dataset.days,
                                              fe_cfg.latent_dim, dc_cfg, rng))
        self.encoder = self.child(TransformerEncoder("enc", model_cfg, rng))
        self.ph_decoder = self.child(TransformerDecoder(
            "phdec", self.pvocab.decoder_size, model_cfg.phoneme_decoder_layers,
            model_cfg, rng))
        self.word_decoder = None
        self.mfcc_head = None
        if with_word_decoder:
            self.word_decoder = self.child(TransformerDecoder(
                "worddec", self.wvocab.size, model_cfg.word_decoder_layers,
                model_cfg, rng))
        if with_mfcc_head:
            self.mfcc_head = self.child(Linear("mfcc_head", model_cfg.d_model,
                                               MFCC_DIM, rng))

    # ---- forward pieces -------------------------------------------------

    def encode(self, features, day: int, ctx: Ctx, use_positions: bool = True):
        lat = self.frontend(features, ctx)
        cal = self.daycal(lat, day)
        return self.encoder(cal, ctx, use_positions=use_positions)

    def phoneme_logits(self, enc: Tensor, tokens_in, ctx: Ctx) -> Tensor:
        tokens_in = np.asarray(tokens_in, dtype=np.int64)
        if (tokens_in == self.pvocab.blank_id).any():
            raise ValueError("phoneme decoder targets must not contain the blank id")
        return self.ph_decoder(enc, tokens_in, ctx)

    def word_logits(self, enc: Tensor, tokens_in, ctx: Ctx) -> Tensor:
        if self.word_decoder is None:
            raise ValueError("model has no word decoder")
        return self.word_decoder(enc, tokens_in, ctx)

    def mfcc_loss(self, layer_states, mfcc_targets: np.ndarray) -> Tensor:
        """MSE of the linear head on layer-k states vs pooled MFCC targets."""
        if self.mfcc_head is None:
            raise ValueError("model has no MFCC head")
        if mfcc_targets.shape[1] != MFCC_DIM:
            raise ValueError(f"MFCC targets must have width {MFCC_DIM}")
        tap = layer_states[self.cfg.mfcc_tap_index]
        pooled = pool_rows(mfcc_targets, self.frontend.cfg.stride)
        n = min(tap.data.shape[0], pooled.shape[0])
        from .autodiff import slice_rows
        return mse(self.mfcc_head(slice_rows(tap, 0, n)), pooled[:n])

    # ---- decoding --------------------------------------------------------

    def greedy_phonemes(self, enc: Tensor, max_len: int) -> list[int]:
        return greedy_decode(self.ph_decoder, enc, self.pvocab.bos_id,
                             self.pvocab.eos_id, max_len)

    def greedy_words(self, enc: Tensor, max_len: int) -> list[int]:
        if self.word_decoder is None:
            raise ValueError("model has no word decoder")
        return greedy_decode(self.word_decoder, enc, self.wvocab.bos_id,
                             self.wvocab.eos_id, max_len)

    def capture_attention(self, features: np.ndarray, day: int,
                          ph_reference, word_reference=None) -> AttentionBundle:
        """Teacher-forced eval pass with every attention map recorded."""
        capture: dict = {}
        ctx = Ctx(train=False, capture=capture)
        with no_grad():
            enc, _ = self.encode(features, day, ctx)
            ph_in = [self.pvocab.bos_id] + [int(i) for i in ph_reference]
            self.phoneme_logits(enc, ph_in, ctx)
            if self.word_decoder is not None and word_reference is not None:
                w_in = [self.wvocab.bos_id] + [int(i) for i in word_reference]
                self.word_logits(enc, w_in, ctx)
        bundle = AttentionBundle()
        for i in range(self.cfg.encoder_layers):
            bundle.encoder_self.append(capture[f"enc.self.l{i}"][0])
        for i in range(self.cfg.phoneme_decoder_layers):
            bundle.phoneme_self.append(capture[f"phdec.self.l{i}"][0])
            bundle.phoneme_cross.append(capture[f"phdec.cross.l{i}"][0])
        if self.word_decoder is not None and word_reference is not None:
            for i in range(self.cfg.word_decoder_layers):
                bundle.word_self.append(capture[f"worddec.self.l{i}"][0])
                bundle.word_cross.append(capture[f"worddec.cross.l{i}"][0])
        return bundle

    # ---- bookkeeping -----------------------------------------------------

    def trainable_parameters(self):
        frozen = set()
        if self.word_decoder is not None and self.cfg.freeze_word_layers > 0:
            frozen = self.word_decoder.layer_param_names(self.cfg.freeze_word_layers)
        return [p for p in self.parameters() if p.name not in frozen]

    def graph_audit(self) -> dict:
        audit = {"frontend": type(self.frontend), "daycal": type(self.daycal),
                 "encoder": type(self.encoder), "phoneme_decoder": type(self.ph_decoder)}
        if self.word_decoder is not None:
            audit["word_decoder"] = type(self.word_decoder)
        if self.mfcc_head is not None:
            audit["mfcc_head"] = type(self.mfcc_head)
        return audit


def pool_rows(x: np.ndarray, factor: int) -> np.ndarray:
    """Mean-pool rows in windows of ``factor`` (tail window may be shorter)."""
    x = np.asarray(x, dtype=np.float64)
    n_out = -(-x.shape[0] // factor)
    out = np.empty((n_out, x.shape[1]))
    for i in range(n_out):
        out[i] = x[i * factor:(i + 1) * factor].mean(axis=0)
    return out


def greedy_decode(decoder: TransformerDecoder, enc: Tensor, bos: int, eos: int,
                  max_len: int) -> list[int]:
    """Argmax decoding (lowest id wins ties); returns tokens without BOS/EOS."""
    prefix = [bos]
    with no_grad():
        for _ in range(max_len):
            lp = decoder.step_logprobs(enc, prefix)
            nxt = int(lp.argmax())
            if nxt == eos:
                break
            prefix.append(nxt)
    return prefix[1:]


def sequence_logprob(decoder: TransformerDecoder, enc: Tensor, tokens,
                     bos: int, eos: int, normalize: bool = True) -> float:
    """Teacher-forced log-likelihood of ``tokens`` (+EOS), optionally per-token."""
    tokens = [int(t) for t in tokens]
    with no_grad():
        logits = decoder(enc, [bos] + tokens, Ctx(train=False)).data
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    targets = tokens + [eos]
    total = float(sum(logp[i, t] for i, t in enumerate(targets)))
    return total / len(targets) if normalize else total


def phoneme_cross_entropy(model: SpeechSeq2Seq, enc: Tensor, phonemes,
                          ctx: Ctx) -> Tensor:
    v = model.pvocab
    tokens_in = [v.bos_id] + [int(p) for p in phonemes]
    targets = [int(p) for p in phonemes] + [v.eos_id]
    logits = model.phoneme_logits(enc, tokens_in, ctx)
    return cross_entropy(logits, targets, ignore_index=v.pad_id)


def word_cross_entropy(model: SpeechSeq2Seq, enc: Tensor, words, ctx: Ctx) -> Tensor:
    v = model.wvocab
    tokens_in = [v.bos_id] + [int(w) for w in words]
    targets = [int(w) for w in words] + [v.eos_id]
    logits = model.word_logits(enc, tokens_in, ctx)
    return cross_entropy(logits, targets, ignore_index=v.pad_id)

"""Evaluation harness: PER/WER over dataset splits, per-trial and pooled."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import clear_tape, no_grad
from .layers import Ctx
from .metrics import bootstrap_ci, per, per_trial_rates, pooled_rate, wer
from .synthdata import zscore_trials


@dataclass
class EvalReport:
    split: str
    n_trials: int
    per_pooled: float | None = None
    per_mean: float | None = None
    per_ci: tuple | None = None
    wer_pooled: float | None = None
    wer_mean: float | None = None
    wer_ci: tuple | None = None
    per_trial: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "per_trial"}


def decode_phonemes(model, variant: str, feats: np.ndarray, trial,
                    day_override: int | None = None) -> list[int]:
    day = trial.day_id if day_override is None else day_override
    max_len = int(np.ceil(1.5 * len(trial.phonemes))) + 1
    with no_grad():
        if variant == "seq2seq":
            enc, _ = model.encode(feats, day, Ctx(train=False))
            hyp = model.greedy_phonemes(enc, max_len)
        else:
            hyp = model.greedy_phonemes(feats, day)
        clear_tape()
    return hyp


def decode_words(model, feats: np.ndarray, trial, max_length: int = 16,
                 day_override: int | None = None) -> list[int]:
    day = trial.day_id if day_override is None else day_override
    with no_grad():
        if hasattr(model, "word_states"):  # ctc baseline
            enc = model.word_states(feats, day, Ctx(train=False))
            from .seq2seq import greedy_decode
            hyp = greedy_decode(model.word_decoder, enc, model.wvocab.bos_id,
                                model.wvocab.eos_id, max_length)
        else:
            enc, _ = model.encode(feats, day, Ctx(train=False))
            hyp = model.greedy_words(enc, max_length)
        clear_tape()
    return hyp


def evaluate_split(model, variant: str, dataset, split: str = "test",
                   with_words: bool = False, day_override: int | None = None,
                   days: set | None = None, seed: int = 0) -> EvalReport:
    """Greedy-decode a split and report pooled + per-trial mean error rates."""
    trials = dataset.trials(split)
    feats = zscore_trials(trials)
    if days is not None:
        pairs = [(f, t) for f, t in zip(feats, trials) if t.day_id in days]
    else:
        pairs = list(zip(feats, trials))
    report = EvalReport(split=split, n_trials=len(pairs))

    per_pairs = []
    wer_pairs = []
    for f, t in pairs:
        hyp = decode_phonemes(model, variant, f, t, day_override)
        per_pairs.append(per(t.phonemes, hyp, dataset.phoneme_vocab))
        if with_words:
            wids = decode_words(model, f, t, day_override=day_override)
            wer_pairs.append(wer(t.text, dataset.word_vocab.text(wids)))
        report.per_trial.append({
            "day": t.day_id, "per": per_pairs[-1].rate,
            "wer": wer_pairs[-1].rate if with_words else None})

    report.per_pooled = pooled_rate(per_pairs)
    rates = per_trial_rates(per_pairs)
    report.per_mean = float(rates.mean()) if rates.size else None
    if rates.size > 1:
        ci = bootstrap_ci(rates, seed=seed)
        report.per_ci = (ci.low, ci.high)
    if with_words:
        report.wer_pooled = pooled_rate(wer_pairs)
        wrates = per_trial_rates(wer_pairs)
        report.wer_mean = float(wrates.mean()) if wrates.size else None
        if wrates.size > 1:
            ci = bootstrap_ci(wrates, seed=seed)
            report.wer_ci = (ci.low, ci.high)
    return report


def evaluate_per(model, variant: str, dataset, split: str = "test",
                 day_override: int | None = None, days: set | None = None) -> float:
    return evaluate_split(model, variant, dataset, split,
                          day_override=day_override, days=days).per_pooled

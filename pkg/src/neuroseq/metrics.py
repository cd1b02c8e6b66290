"""Edit-distance error rates (PER/WER) and bootstrap confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PUNCTUATION = set(".,?!;:'\"-")


def levenshtein(a, b) -> int:
    """Minimum insertions + deletions + substitutions between token sequences."""
    a, b = list(a), list(b)
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (ai != b[j - 1]))
        prev = cur
    return prev[m]


def normalize_text(text: str) -> list[str]:
    """Lowercase, drop punctuation (.,?!;:'\"-), split on whitespace."""
    cleaned = "".join(c for c in text.lower() if c not in PUNCTUATION)
    return cleaned.split()


@dataclass
class ErrorRate:
    edits: int
    ref_len: int
    empty_ref: bool = False  # flagged when the reference was empty

    @property
    def rate(self) -> float:
        if self.ref_len == 0:
            # empty ref with non-empty hyp: report insertions over unit length
            return float(self.edits)
        return self.edits / self.ref_len


def per(ref_phonemes, hyp_phonemes, vocab=None) -> ErrorRate:
    """Phoneme error rate after stripping BOS/EOS/PAD boundary tokens."""
    if vocab is not None:
        ref = vocab.strip(ref_phonemes)
        hyp = vocab.strip(hyp_phonemes)
    else:
        ref = [int(i) for i in ref_phonemes]
        hyp = [int(i) for i in hyp_phonemes]
    edits = levenshtein(ref, hyp)
    return ErrorRate(edits=edits, ref_len=len(ref), empty_ref=len(ref) == 0)


def wer(ref_text: str, hyp_text: str) -> ErrorRate:
    """Word error rate after lowercasing and punctuation removal."""
    ref = normalize_text(ref_text)
    hyp = normalize_text(hyp_text)
    edits = levenshtein(ref, hyp)
    return ErrorRate(edits=edits, ref_len=len(ref), empty_ref=len(ref) == 0)


def pooled_rate(pairs) -> float:
    """Corpus-level rate: pooled edits over pooled reference lengths."""
    edits = sum(e.edits for e in pairs)
    ref = sum(e.ref_len for e in pairs)
    return edits / ref if ref else float(edits > 0)


def per_trial_rates(pairs) -> np.ndarray:
    return np.array([e.rate for e in pairs], dtype=np.float64)


@dataclass
class BootstrapCI:
    low: float
    high: float
    level: float
    degenerate: bool = False  # single value: zero-width interval, flagged

    def contains(self, x: float) -> bool:
        return self.low <= x <= self.high


def bootstrap_ci(values, n_boot: int = 2000, level: float = 0.95,
                 seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap interval for the mean of ``values``."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("bootstrap_ci needs at least one value")
    if vals.size == 1:
        return BootstrapCI(float(vals[0]), float(vals[0]), level, degenerate=True)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, vals.size, size=(n_boot, vals.size))
    means = vals[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    return BootstrapCI(float(low), float(high), level)

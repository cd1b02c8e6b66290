"""Candidate generation (greedy / beam / nucleus) and three-signal rescoring.

Hypotheses from beam search and nucleus sampling are pooled, then scored
by (1) the phoneme decoder's likelihood of each candidate's pronunciation
given the neural input, (2) agreement between that pronunciation and the
greedy phoneme prediction (negative PER), and (3) a bigram language model
fitted on training sentences. A weighted blend (default 9:4:5) picks the
output; an oracle selector lower-bounds what the pool could achieve.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, no_grad
from .layers import Ctx
from .metrics import levenshtein, per, wer
from .seq2seq import sequence_logprob
from .vocab import Lexicon, WordVocabulary


@dataclass
class GenerationConfig:
    mode: str = "pool"            # greedy | beam | nucleus | pool
    beam_width: int = 20
    sample_count: int = 128
    top_p: float = 0.95
    temperature: float = 1.0
    top_k: int = 0                # 0 disables top-k truncation
    max_length: int = 16
    seed: int = 0
    oov_floor: float = -25.0      # phoneme-score floor for out-of-lexicon words
    weights: tuple = (9.0, 4.0, 5.0)  # phoneme head : PER consistency : LM
    normalize_head_score: bool = True

    def validate(self):
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError("top_p must be in (0, 1]")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        return self


@dataclass
class Hypothesis:
    tokens: tuple                 # word ids, no BOS/EOS
    text: str
    gen_logprob: float            # length-normalized generation score
    source: str = "beam"
    phoneme_head_score: float = 0.0
    per_consistency: float = 0.0
    lm_score: float = 0.0
    blended: float = 0.0

    def scores(self) -> dict:
        return {
            "gen_logprob": self.gen_logprob,
            "phoneme_head_score": self.phoneme_head_score,
            "per_consistency": self.per_consistency,
            "lm_score": self.lm_score,
            "blended": self.blended,
        }


def beam_search(step_fn, bos: int, eos: int, width: int, max_length: int):
    """Deterministic beam search, ranked by length-normalized log-prob.

    ``step_fn(prefix)`` returns next-token log-probs. Active beams are
    pruned by total log-prob (all have equal length within a step, so this
    matches normalized pruning); finished hypotheses leave the beam. Ties
    break toward the lexicographically smaller token sequence. Returns up
    to ``width`` entries as [(tokens, normalized score)].
    """
    active = [(0.0, (bos,))]           # (total logprob, prefix)
    finished: list[tuple[float, tuple]] = []
    for _ in range(max_length):
        if not active:
            break
        cand = list(finished)          # finished hypotheses keep their slots
        for total, prefix in active:
            lp = step_fn(prefix)
            for tok in range(lp.shape[0]):
                cand.append((total + float(lp[tok]), prefix + (tok,)))
        cand.sort(key=lambda c: (-c[0], c[1][1:]))
        active, finished = [], []
        for total, seq in cand:
            if seq[-1] == eos:
                finished.append((total, seq))
            else:
                active.append((total, seq))
            if len(active) + len(finished) >= width:
                break
    pool = list(finished)
    for total, prefix in active:       # length-capped, unfinished
        pool.append((total, prefix + (eos,)))
    ranked = []
    for total, seq in pool:
        tokens = seq[1:-1]
        norm = total / max(1, len(seq) - 1)
        ranked.append((tokens, norm))
    ranked.sort(key=lambda r: (-r[1], r[0]))
    return ranked[:width]


def greedy_search(step_fn, bos: int, eos: int, max_length: int):
    prefix = (bos,)
    total = 0.0
    for _ in range(max_length):
        lp = step_fn(prefix)
        tok = int(lp.argmax())
        total += float(lp[tok])
        prefix = prefix + (tok,)
        if tok == eos:
            break
    tokens = prefix[1:-1] if prefix[-1] == eos else prefix[1:]
    return tokens, total / max(1, len(prefix) - 1)


def nucleus_sample(step_fn, bos: int, eos: int, cfg: GenerationConfig,
                   rng: np.random.Generator):
    """One stochastic draw under top-p (and optional top-k) truncation."""
    prefix = (bos,)
    total = 0.0
    for _ in range(cfg.max_length):
        lp = step_fn(prefix)
        logits = lp / cfg.temperature
        z = logits - logits.max()
        probs = np.exp(z)
        probs /= probs.sum()
        if cfg.top_k > 0:
            cutoff = np.sort(probs)[-cfg.top_k]
            probs = np.where(probs >= cutoff, probs, 0.0)
        order = np.argsort(-probs, kind="stable")
        csum = np.cumsum(probs[order])
        keep_n = int(np.searchsorted(csum, cfg.top_p) + 1)
        keep = order[:keep_n]
        p = probs[keep] / probs[keep].sum()
        tok = int(rng.choice(keep, p=p))
        total += float(lp[tok])
        prefix = prefix + (tok,)
        if tok == eos:
            break
    tokens = prefix[1:-1] if prefix[-1] == eos else prefix[1:]
    return tokens, total / max(1, len(prefix) - 1)


def generate_candidates(step_fn, wvocab: WordVocabulary,
                        cfg: GenerationConfig) -> list[Hypothesis]:
    """Candidate pool per the configured mode (pool = beam + nucleus, deduped)."""
    cfg.validate()
    hyps: dict[tuple, Hypothesis] = {}

    def put(tokens, score, source):
        if tokens not in hyps or score > hyps[tokens].gen_logprob:
            hyps[tokens] = Hypothesis(tokens=tokens, text=wvocab.text(tokens),
                                      gen_logprob=score, source=source)

    if cfg.mode == "greedy":
        put(*greedy_search(step_fn, wvocab.bos_id, wvocab.eos_id,
                           cfg.max_length), "greedy")
    if cfg.mode in ("beam", "pool"):
        for tokens, score in beam_search(step_fn, wvocab.bos_id, wvocab.eos_id,
                                         cfg.beam_width, cfg.max_length):
            put(tokens, score, "beam")
    if cfg.mode in ("nucleus", "pool"):
        rng = np.random.default_rng(cfg.seed)
        for _ in range(cfg.sample_count):
            tokens, score = nucleus_sample(step_fn, wvocab.bos_id, wvocab.eos_id,
                                           cfg, rng)
            put(tokens, score, "nucleus")
    out = list(hyps.values())
    out.sort(key=lambda h: (-h.gen_logprob, h.tokens))
    return out


class BigramLM:
    """Add-k smoothed bigram model over the closed word vocabulary."""

    def __init__(self, vocab: WordVocabulary, k: float = 0.5):
        self.vocab = vocab
        self.k = k
        v = vocab.n_words
        self.unigram_counts = np.zeros(v)
        self.bigram_counts = np.zeros((v + 1, v))  # row v = sentence start
        self.start_row = v

    def fit(self, sentences) -> "BigramLM":
        for words in sentences:
            prev = self.start_row
            for w in words:
                w = int(w)
                self.bigram_counts[prev, w] += 1
                self.unigram_counts[w] += 1
                prev = w
        return self

    def logprob(self, word: int, prev: int | None) -> float:
        row = self.start_row if prev is None else int(prev)
        v = self.vocab.n_words
        num = self.bigram_counts[row, int(word)] + self.k
        den = self.bigram_counts[row].sum() + self.k * v
        return float(np.log(num / den))

    def continuation_probs(self, prev: int | None) -> np.ndarray:
        row = self.start_row if prev is None else int(prev)
        v = self.vocab.n_words
        num = self.bigram_counts[row] + self.k
        return num / (self.bigram_counts[row].sum() + self.k * v)

    def score(self, tokens) -> float:
        """Length-normalized log-probability of a word-id sequence."""
        tokens = [int(t) for t in tokens]
        if not tokens:
            return float(np.log(self.k / (self.bigram_counts[self.start_row].sum()
                                          + self.k * self.vocab.n_words)))
        total = 0.0
        prev = None
        for t in tokens:
            total += self.logprob(t, prev)
            prev = t
        return total / len(tokens)


def fit_ngram(train_trials, vocab: WordVocabulary, order: int = 2,
              k: float = 0.5) -> BigramLM:
    if order != 2:
        raise ValueError("only bigram LMs are supported")
    return BigramLM(vocab, k=k).fit([t.words for t in train_trials])


def score_candidates(hyps: list[Hypothesis], model, enc: Tensor,
                     greedy_phonemes, lexicon: Lexicon, lm: BigramLM,
                     cfg: GenerationConfig) -> list[Hypothesis]:
    """Fill the three component scores and the blended score for each pool entry."""
    w1, w2, w3 = cfg.weights
    greedy_ph = [int(p) for p in greedy_phonemes]
    scored = []
    for h in hyps:
        words = h.text.split() if h.text else []
        if words and all(lexicon.covers(w) for w in words):
            pron = lexicon.g2p(words)
            head = sequence_logprob(model.ph_decoder, enc, pron,
                                    model.pvocab.bos_id, model.pvocab.eos_id,
                                    normalize=cfg.normalize_head_score)
            consistency = -per(pron, greedy_ph).rate if pron else -float(len(greedy_ph))
        else:
            head = cfg.oov_floor
            consistency = cfg.oov_floor
        lm_score = lm.score(h.tokens)
        blended = w1 * head + w2 * consistency + w3 * lm_score
        scored.append(replace(h, phoneme_head_score=head,
                              per_consistency=consistency, lm_score=lm_score,
                              blended=blended))
    return scored


def select_best(hyps: list[Hypothesis]) -> Hypothesis:
    """Argmax of the blended score; ties go to higher generation log-prob."""
    if not hyps:
        raise ValueError("empty candidate set")
    return max(hyps, key=lambda h: (h.blended, h.gen_logprob, h.tokens))


def oracle_select(hyps: list[Hypothesis], reference_text: str) -> Hypothesis:
    """Candidate with minimum WER against the reference."""
    if not hyps:
        raise ValueError("empty candidate set")
    return min(hyps, key=lambda h: (wer(reference_text, h.text).rate, h.tokens))


def tune_blend_weights(trials_scored, grid=None) -> tuple:
    """Grid-search blend weights minimizing WER on scored validation pools.

    ``trials_scored`` is a list of (hypotheses, reference_text) pairs whose
    component scores are already filled.
    """
    if grid is None:
        base = (0.0, 1.0, 2.0, 4.0, 6.0, 9.0)
        grid = [(a, b, c) for a in base for b in base for c in base
                if (a, b, c) != (0.0, 0.0, 0.0)]
    best = None
    for w in grid:
        edits = 0
        refs = 0
        for hyps, ref_text in trials_scored:
            pick = max(hyps, key=lambda h: (
                w[0] * h.phoneme_head_score + w[1] * h.per_consistency
                + w[2] * h.lm_score, h.gen_logprob, h.tokens))
            e = wer(ref_text, pick.text)
            edits += e.edits
            refs += e.ref_len
        rate = edits / max(1, refs)
        if best is None or rate < best[0]:
            best = (rate, w)
    return best[1]

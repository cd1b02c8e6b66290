"""Deterministic synthetic multi-day attempted-speech corpus.

Sentences come from a bigram word process; each phoneme emits a prototype
latent vector held for a few 20 ms frames. Per-day drift (random-walk
rotation-plus-scaling of channel space composed with per-channel gain and
offset walks) maps the latent into observed spike counts and band power,
so the corpus exhibits the global *and* feature-wise session structure the
calibration module is built to remove. Everything is a pure function of
(config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .vocab import Lexicon, PhonemeVocabulary, WordVocabulary, build_lexicon

MFCC_DIM = 14


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_days: int = 8
    trials_per_day: int = 250
    channels: int = 16
    vocab_size: int = 30
    sentence_len_min: int = 3
    sentence_len_max: int = 6
    dwell_min: int = 3            # frames each phoneme is held
    dwell_max: int = 8
    spike_noise: float = 0.25     # pre-softplus additive noise on counts
    power_noise: float = 0.25
    mfcc_noise: float = 0.10
    latent_jitter: float = 0.05
    drift_magnitude: float = 1.0  # global multiplier on all day-walk steps
    drift_rotation: float = 0.22  # radians per Givens plane per day step
    drift_gain: float = 0.05
    drift_offset: float = 0.10
    block_size: int = 50
    train_frac: float = 0.8
    val_frac: float = 0.1

    def validate(self):
        if self.n_days < 1 or self.trials_per_day < 1:
            raise ConfigError("need at least one day and one trial per day")
        if self.channels < 2:
            raise ConfigError("need at least 2 channels")
        if self.vocab_size < 2:
            raise ConfigError("vocabulary must have at least 2 words")
        if not (1 <= self.sentence_len_min <= self.sentence_len_max):
            raise ConfigError("bad sentence length range")
        if not (1 <= self.dwell_min <= self.dwell_max):
            raise ConfigError("bad dwell range")
        if not (0 < self.train_frac and self.train_frac + self.val_frac < 1):
            raise ConfigError("train/val fractions leave no test split")
        return self


@dataclass
class NeuralTrial:
    """One attempted-speech trial (features carry counts then band power)."""

    day_id: int
    block_id: int
    features: np.ndarray          # (T, 2*channels) float32
    phonemes: np.ndarray          # phoneme ids, never blank
    words: np.ndarray             # word ids
    text: str
    mfcc: np.ndarray              # (T_a, 14) float32
    frame_labels: np.ndarray | None = None  # per-frame phoneme id, not serialized

    def __post_init__(self):
        if self.features.shape[1] % 2 != 0:
            raise ValueError("feature count must be even (two families per channel)")
        if self.mfcc.shape[1] != MFCC_DIM:
            raise ValueError(f"mfcc width must be {MFCC_DIM}")
        if self.features.shape[0] < len(self.phonemes):
            raise ValueError("trial shorter than its phoneme sequence")


@dataclass
class DriftModel:
    """Per-day channel mixing, gains and offsets from a seeded random walk."""

    mixing: np.ndarray    # (n_days, ch, ch), invertible
    gains: np.ndarray     # (n_days, ch)
    offsets: np.ndarray   # (n_days, ch)

    @classmethod
    def sample(cls, rng: np.random.Generator, cfg: CorpusConfig) -> "DriftModel":
        ch, n = cfg.channels, cfg.n_days
        mag = cfg.drift_magnitude
        mixing = np.empty((n, ch, ch))
        gains = np.empty((n, ch))
        offsets = np.empty((n, ch))
        m = np.eye(ch)
        log_gain = np.zeros(ch)
        offset = np.zeros(ch)
        for d in range(n):
            mixing[d] = m
            gains[d] = np.exp(log_gain)
            offsets[d] = offset
            step = _rotation_scaling_step(rng, ch, mag * cfg.drift_rotation)
            m = m @ step
            log_gain = log_gain + mag * cfg.drift_gain * rng.standard_normal(ch)
            offset = offset + mag * cfg.drift_offset * rng.standard_normal(ch)
        return cls(mixing=mixing, gains=gains, offsets=offsets)

    def distance_from_identity(self) -> np.ndarray:
        eye = np.eye(self.mixing.shape[1])
        return np.array([np.linalg.norm(m - eye) for m in self.mixing])


def _rotation_scaling_step(rng: np.random.Generator, ch: int, angle_scale: float):
    """One walk step: Givens rotations on random disjoint planes, mild scaling."""
    step = np.eye(ch)
    perm = rng.permutation(ch)
    for i in range(ch // 2):
        p, q = int(perm[2 * i]), int(perm[2 * i + 1])
        theta = angle_scale * rng.standard_normal()
        g = np.eye(ch)
        c, s = np.cos(theta), np.sin(theta)
        g[p, p] = c
        g[q, q] = c
        g[p, q] = -s
        g[q, p] = s
        step = step @ g
    log_s = 0.25 * angle_scale * rng.standard_normal(ch)
    return step * np.exp(log_s)[None, :]


@dataclass
class Dataset:
    config: dict
    phoneme_vocab: PhonemeVocabulary
    word_vocab: WordVocabulary
    lexicon: Lexicon
    days: list
    splits: dict = field(default_factory=dict)  # split name -> list[NeuralTrial]

    def trials(self, split: str) -> list:
        return self.splits[split]

    @property
    def n_channels(self) -> int:
        return int(self.config["channels"])


def generate_corpus(config: CorpusConfig, seed: int) -> Dataset:
    """Build train/val/test splits for a synthetic multi-day corpus."""
    config.validate()
    rng = np.random.default_rng(seed)
    pvocab = PhonemeVocabulary()
    wvocab, lexicon = build_lexicon(rng, pvocab, config.vocab_size)

    v = wvocab.n_words
    init_probs = rng.dirichlet(np.full(v, 0.8))
    trans = rng.dirichlet(np.full(v, 0.8), size=v)

    ch = config.channels
    prototypes = rng.normal(0.0, 1.0, size=(pvocab.n_phones, ch))
    power_readout = rng.normal(0.0, 1.0, size=(ch, ch)) / np.sqrt(ch)
    mfcc_proj = rng.normal(0.0, 1.0, size=(MFCC_DIM, ch)) / np.sqrt(ch)
    drift = DriftModel.sample(rng, config)

    splits: dict[str, list[NeuralTrial]] = {"train": [], "val": [], "test": []}
    n_train = int(round(config.train_frac * config.trials_per_day))
    n_val = int(round(config.val_frac * config.trials_per_day))

    for day in range(config.n_days):
        m = drift.mixing[day]
        gain = drift.gains[day]
        offset = drift.offsets[day]
        for idx in range(config.trials_per_day):
            n_words = int(rng.integers(config.sentence_len_min,
                                       config.sentence_len_max + 1))
            words = [int(rng.choice(v, p=init_probs))]
            for _ in range(n_words - 1):
                words.append(int(rng.choice(v, p=trans[words[-1]])))
            phonemes = lexicon.g2p([wvocab.words[w] for w in words])

            dwell = rng.integers(config.dwell_min, config.dwell_max + 1,
                                 size=len(phonemes))
            frame_labels = np.repeat(np.asarray(phonemes), dwell)
            T = frame_labels.size
            latent = prototypes[frame_labels]
            if config.latent_jitter > 0:
                latent = latent + config.latent_jitter * rng.standard_normal((T, ch))

            drifted = latent @ m.T * gain[None, :] + offset[None, :]
            pre = 1.5 * drifted + 1.0
            if config.spike_noise > 0:
                pre = pre + config.spike_noise * rng.standard_normal((T, ch))
            counts = np.round(np.logaddexp(0.0, pre))  # softplus then round
            power = drifted @ power_readout.T
            if config.power_noise > 0:
                power = power + config.power_noise * rng.standard_normal((T, ch))
            mfcc = latent @ mfcc_proj.T
            if config.mfcc_noise > 0:
                mfcc = mfcc + config.mfcc_noise * rng.standard_normal((T, MFCC_DIM))

            trial = NeuralTrial(
                day_id=day,
                block_id=idx // config.block_size,
                features=np.concatenate([counts, power], axis=1).astype(np.float32),
                phonemes=np.asarray(phonemes, dtype=np.int64),
                words=np.asarray(words, dtype=np.int64),
                text=wvocab.text(words),
                mfcc=mfcc.astype(np.float32),
                frame_labels=frame_labels.astype(np.int64),
            )
            if idx < n_train:
                splits["train"].append(trial)
            elif idx < n_train + n_val:
                splits["val"].append(trial)
            else:
                splits["test"].append(trial)

    return Dataset(
        config=asdict(config),
        phoneme_vocab=pvocab,
        word_vocab=wvocab,
        lexicon=lexicon,
        days=list(range(config.n_days)),
        splits=splits,
    )


def zscore_block(features: list[np.ndarray], groups: list) -> list[np.ndarray]:
    """Z-score each channel within each block (population std, float64 out).

    ``features`` are (T, C) matrices, ``groups`` the matching block keys.
    Zero-variance channels map to all-zeros.
    """
    if len(features) != len(groups):
        raise ValueError("features and groups must align")
    out: list[np.ndarray | None] = [None] * len(features)
    by_group: dict = {}
    for i, g in enumerate(groups):
        by_group.setdefault(g, []).append(i)
    for idxs in by_group.values():
        stacked = np.concatenate([np.asarray(features[i], dtype=np.float64)
                                  for i in idxs], axis=0)
        if stacked.shape[0] < 2:
            raise ValueError("z-score block needs at least 2 frames")
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        safe = np.where(std > 0, std, 1.0)
        for i in idxs:
            z = (np.asarray(features[i], dtype=np.float64) - mean) / safe
            z[:, std == 0] = 0.0
            out[i] = z
    return out


def zscore_trials(trials: list[NeuralTrial]) -> list[np.ndarray]:
    """Block-wise z-scored float64 feature matrices, aligned with ``trials``."""
    feats = [t.features for t in trials]
    groups = [(t.day_id, t.block_id) for t in trials]
    return zscore_block(feats, groups)


def subsample_fraction(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Day-stratified subsample of the train split (nested across fractions).

    Per day, keeps the first round(fraction * n_d) entries of a seeded
    permutation, so smaller fractions are subsets of larger ones under a
    shared seed. Fraction 1.0 returns every trial in original order.
    """
    if not (0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    train = dataset.trials("train")
    by_day: dict[int, list[int]] = {}
    for i, t in enumerate(train):
        by_day.setdefault(t.day_id, []).append(i)
    keep: list[int] = []
    for day in sorted(by_day):
        idxs = by_day[day]
        n_keep = int(np.floor(fraction * len(idxs) + 0.5))
        if n_keep == 0:
            raise ValueError(
                f"fraction {fraction} leaves no trials for day {day}; "
                "scaling runs need every day present"
            )
        perm = np.random.default_rng([seed, day]).permutation(len(idxs))
        keep.extend(idxs[j] for j in perm[:n_keep])
    keep.sort()
    sub = Dataset(
        config=dict(dataset.config),
        phoneme_vocab=dataset.phoneme_vocab,
        word_vocab=dataset.word_vocab,
        lexicon=dataset.lexicon,
        days=list(dataset.days),
        splits={
            "train": [train[i] for i in keep],
            "val": list(dataset.trials("val")),
            "test": list(dataset.trials("test")),
        },
    )
    return sub

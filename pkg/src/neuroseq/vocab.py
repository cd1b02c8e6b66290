"""Phoneme and word vocabularies plus the lexicon used as exact G2P."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ARPABET = (
    "AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG "
    "OW OY P R S SH T TH UH UW V W Y Z ZH"
).split()

VOWELS = set("AA AE AH AO AW AY EH ER EY IH IY OW OY UH UW".split())
CONSONANTS = [p for p in ARPABET if p not in VOWELS]

# loose phoneme -> spelling chunks for synthetic word text
_SPELL = {
    "AA": "o", "AE": "a", "AH": "u", "AO": "aw", "AW": "ow", "AY": "i",
    "B": "b", "CH": "ch", "D": "d", "DH": "th", "EH": "e", "ER": "er",
    "EY": "ay", "F": "f", "G": "g", "HH": "h", "IH": "i", "IY": "ee",
    "JH": "j", "K": "k", "L": "l", "M": "m", "N": "n", "NG": "ng",
    "OW": "oa", "OY": "oy", "P": "p", "R": "r", "S": "s", "SH": "sh",
    "T": "t", "TH": "tth", "UH": "oo", "UW": "ue", "V": "v", "W": "w",
    "Y": "y", "Z": "z", "ZH": "zh",
}


class PhonemeVocabulary:
    """39 ARPAbet symbols plus BOS/EOS/PAD and a trailing CTC blank (43 ids)."""

    def __init__(self):
        self.symbols = list(ARPABET) + ["<bos>", "<eos>", "<pad>", "<blank>"]
        self.id_of = {s: i for i, s in enumerate(self.symbols)}
        self.n_phones = len(ARPABET)        # 39 real phonemes
        self.bos_id = self.id_of["<bos>"]   # 39
        self.eos_id = self.id_of["<eos>"]   # 40
        self.pad_id = self.id_of["<pad>"]   # 41
        self.blank_id = self.id_of["<blank>"]  # 42, always last
        self.size = len(self.symbols)       # 43
        self.decoder_size = self.size - 1   # 42, autoregressive head has no blank
        assert self.size == 43 and self.blank_id == self.size - 1

    def ids(self, symbols) -> list[int]:
        return [self.id_of[s] for s in symbols]

    def to_symbols(self, ids) -> list[str]:
        return [self.symbols[int(i)] for i in ids]

    def strip(self, ids) -> list[int]:
        """Drop BOS/EOS/PAD boundary tokens (blank never appears in targets)."""
        drop = {self.bos_id, self.eos_id, self.pad_id}
        return [int(i) for i in ids if int(i) not in drop]


class WordVocabulary:
    """Closed word list plus BOS/EOS/PAD control ids."""

    def __init__(self, words):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("word vocabulary contains duplicates")
        self.id_of = {w: i for i, w in enumerate(self.words)}
        self.n_words = len(self.words)
        self.bos_id = self.n_words
        self.eos_id = self.n_words + 1
        self.pad_id = self.n_words + 2
        self.size = self.n_words + 3

    def ids(self, words) -> list[int]:
        return [self.id_of[w] for w in words]

    def text(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)

    def strip(self, ids) -> list[int]:
        drop = {self.bos_id, self.eos_id, self.pad_id}
        return [int(i) for i in ids if int(i) not in drop]


@dataclass
class Lexicon:
    """Total word -> phoneme-id pronunciation map (exact desk-scale G2P)."""

    pron: dict = field(default_factory=dict)  # word -> tuple of phoneme ids

    def g2p(self, words) -> list[int]:
        out: list[int] = []
        for w in words:
            if w not in self.pron:
                raise KeyError(f"word {w!r} missing from lexicon")
            out.extend(self.pron[w])
        return out

    def covers(self, word: str) -> bool:
        return word in self.pron

    def inverse_of(self, phoneme_ids) -> str | None:
        """Exact inverse when the phoneme string segments uniquely; else None."""
        target = tuple(int(i) for i in phoneme_ids)
        words = sorted(self.pron)
        memo: dict[int, str | None] = {len(target): ""}

        def solve(i: int):
            if i in memo:
                return memo[i]
            memo[i] = None
            for w in words:
                p = self.pron[w]
                if target[i:i + len(p)] == tuple(p):
                    rest = solve(i + len(p))
                    if rest is not None:
                        memo[i] = (w + " " + rest).strip()
                        break
            return memo[i]

        return solve(0)


def build_lexicon(rng: np.random.Generator, phoneme_vocab: PhonemeVocabulary,
                  n_words: int, min_len: int = 2, max_len: int = 5):
    """Sample a synthetic vocabulary with unique texts and pronunciations."""
    words: list[str] = []
    prons: list[tuple[int, ...]] = []
    seen_text: set[str] = set()
    seen_pron: set[tuple[int, ...]] = set()
    attempts = 0
    while len(words) < n_words:
        attempts += 1
        if attempts > 200 * n_words:
            raise ValueError("could not build a collision-free lexicon")
        length = int(rng.integers(min_len, max_len + 1))
        start_consonant = bool(rng.integers(0, 2))
        syms = []
        for i in range(length):
            pool = CONSONANTS if (i % 2 == 0) == start_consonant else sorted(VOWELS)
            syms.append(pool[int(rng.integers(0, len(pool)))])
        text = "".join(_SPELL[s] for s in syms)
        pron = tuple(phoneme_vocab.id_of[s] for s in syms)
        if text in seen_text or pron in seen_pron:
            continue
        words.append(text)
        prons.append(pron)
        seen_text.add(text)
        seen_pron.add(pron)

    order = np.argsort(np.array(words, dtype=object))
    words = [words[i] for i in order]
    prons = [prons[i] for i in order]
    vocab = WordVocabulary(words)
    lex = Lexicon({w: p for w, p in zip(words, prons)})
    return vocab, lex

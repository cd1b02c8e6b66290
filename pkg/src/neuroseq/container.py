"""NSQD dataset container: byte-exact binary serialization, one file per split.

Layout (all integers little-endian):
  magic "NSQD" | u16 version=1 | u32 header length | JSON header |
  records: { u16 day_id, u16 block_id, u32 T, u32 C, T*C f32 features,
             u16 n_ph + n_ph u16 phoneme ids, u16 n_w + n_w u16 word ids,
             u32 T_a + T_a*14 f32 mfcc }
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .synthdata import Dataset, MFCC_DIM, NeuralTrial
from .vocab import Lexicon, PhonemeVocabulary, WordVocabulary

MAGIC = b"NSQD"
VERSION = 1
SPLITS = ("train", "val", "test")


class ContainerError(ValueError):
    """Malformed container file; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


def _header_dict(dataset: Dataset, split: str) -> dict:
    return {
        "config": dataset.config,
        "phoneme_vocab": dataset.phoneme_vocab.symbols,
        "word_vocab": dataset.word_vocab.words,
        "lexicon": {w: list(p) for w, p in dataset.lexicon.pron.items()},
        "days": list(dataset.days),
        "split": split,
        "n_records": len(dataset.trials(split)),
    }


def write_split(dataset: Dataset, split: str, path) -> Path:
    path = Path(path)
    header = json.dumps(_header_dict(dataset, split), sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header)), header]
    for t in dataset.trials(split):
        T, C = t.features.shape
        chunks.append(struct.pack("<HHII", t.day_id, t.block_id, T, C))
        chunks.append(np.ascontiguousarray(t.features, dtype="<f4").tobytes())
        chunks.append(struct.pack("<H", len(t.phonemes)))
        chunks.append(np.asarray(t.phonemes, dtype="<u2").tobytes())
        chunks.append(struct.pack("<H", len(t.words)))
        chunks.append(np.asarray(t.words, dtype="<u2").tobytes())
        chunks.append(struct.pack("<I", t.mfcc.shape[0]))
        chunks.append(np.ascontiguousarray(t.mfcc, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def write_dataset(dataset: Dataset, outdir) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return {s: write_split(dataset, s, outdir / f"{s}.nsqd") for s in SPLITS}


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise ContainerError(f"truncated container while reading {what}", self.off)
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_split(path) -> tuple[dict, list[NeuralTrial]]:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ContainerError(f"unsupported container: bad magic {magic!r}", 0)
    version = r.u16("version")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}", 4)
    hlen = r.u32("header length")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"bad header JSON: {e}", 10) from e

    trials = []
    for i in range(int(header["n_records"])):
        what = f"record {i}"
        day = r.u16(what)
        block = r.u16(what)
        T = r.u32(what)
        C = r.u32(what)
        feats = np.frombuffer(r.take(4 * T * C, what), dtype="<f4").reshape(T, C)
        n_ph = r.u16(what)
        ph = np.frombuffer(r.take(2 * n_ph, what), dtype="<u2").astype(np.int64)
        n_w = r.u16(what)
        w = np.frombuffer(r.take(2 * n_w, what), dtype="<u2").astype(np.int64)
        t_a = r.u32(what)
        mfcc = np.frombuffer(r.take(4 * t_a * MFCC_DIM, what),
                             dtype="<f4").reshape(t_a, MFCC_DIM)
        words = header["word_vocab"]
        trials.append(NeuralTrial(
            day_id=day, block_id=block,
            features=feats.astype(np.float32),
            phonemes=ph, words=w,
            text=" ".join(words[int(j)] for j in w),
            mfcc=mfcc.astype(np.float32),
        ))
    if r.off != len(buf):
        raise ContainerError("trailing bytes after final record", r.off)
    return header, trials


def read_dataset(indir) -> Dataset:
    indir = Path(indir)
    header = None
    splits = {}
    for s in SPLITS:
        h, trials = read_split(indir / f"{s}.nsqd")
        header = header or h
        splits[s] = trials
    pvocab = PhonemeVocabulary()
    if header["phoneme_vocab"] != pvocab.symbols:
        raise ContainerError("phoneme vocabulary mismatch")
    wvocab = WordVocabulary(header["word_vocab"])
    lex = Lexicon({w: tuple(p) for w, p in header["lexicon"].items()})
    return Dataset(
        config=header["config"],
        phoneme_vocab=pvocab,
        word_vocab=wvocab,
        lexicon=lex,
        days=list(header["days"]),
        splits=splits,
    )


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Semantic equality over everything the container serializes."""
    if a.config != b.config or a.days != b.days:
        return False
    if a.word_vocab.words != b.word_vocab.words or a.lexicon.pron != b.lexicon.pron:
        return False
    for s in SPLITS:
        ta, tb = a.trials(s), b.trials(s)
        if len(ta) != len(tb):
            return False
        for x, y in zip(ta, tb):
            if (x.day_id != y.day_id or x.block_id != y.block_id
                    or not np.array_equal(x.features, y.features)
                    or not np.array_equal(x.phonemes, y.phonemes)
                    or not np.array_equal(x.words, y.words)
                    or not np.array_equal(x.mfcc, y.mfcc)):
                return False
    return True

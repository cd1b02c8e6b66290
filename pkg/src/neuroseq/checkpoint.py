"""NSQC checkpoint container: params, optimizer and scheduler state.

Layout (little-endian): magic "NSQC" | u16 version=1 | u32 header length |
canonical JSON header | four blob groups (current params, best params,
Adam first moments, Adam second moments). Each group: u32 count, then per
tensor { u16 name length, name utf-8, u8 ndim, ndim x u32 dims, f64 data }.
Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"NSQC"
VERSION = 1

ARCH_FIELDS = (
    "variant", "daycal_mode", "with_word_decoder", "with_mfcc_head",
    "model", "frontend", "daycal_cfg", "ctc", "n_channels", "days", "word_vocab",
)


class CheckpointError(ValueError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Stored architecture fields disagree with the requested configuration."""


@dataclass
class Checkpoint:
    header: dict
    params: dict          # name -> float64 array (state at save time)
    best_params: dict     # name -> float64 array (best validation PER)
    opt_m: dict
    opt_v: dict

    @property
    def epoch(self) -> int:
        return int(self.header["epoch"])

    @property
    def best_val_per(self) -> float:
        return float(self.header["best_val_per"])

    def arch(self) -> dict:
        return {k: self.header[k] for k in ARCH_FIELDS}


def _write_group(chunks: list, group: dict):
    chunks.append(struct.pack("<I", len(group)))
    for name in sorted(group):
        arr = np.asarray(group[name], dtype=np.float64)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, header: dict, params: dict, best_params: dict,
                    opt_m: dict, opt_v: dict) -> Path:
    path = Path(path)
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(hjson)), hjson]
    for group in (params, best_params, opt_m, opt_v):
        _write_group(chunks, group)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


def _read_group(buf: bytes, off: int) -> tuple[dict, int]:
    def need(n, what):
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} "
                                  f"(at byte {off})")

    need(4, "group count")
    count = struct.unpack_from("<I", buf, off)[0]
    off += 4
    group = {}
    for _ in range(count):
        need(2, "name length")
        nlen = struct.unpack_from("<H", buf, off)[0]
        off += 2
        need(nlen, "name")
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        need(1, "ndim")
        ndim = struct.unpack_from("<B", buf, off)[0]
        off += 1
        need(4 * ndim, "dims")
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        need(8 * size, f"data of {name}")
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims)
        off += 8 * size
        group[name] = arr.astype(np.float64)
    return group, off


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"unsupported checkpoint: bad magic {buf[:4]!r}")
    version = struct.unpack_from("<H", buf, 4)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    hlen = struct.unpack_from("<I", buf, 6)[0]
    off = 10
    header = json.loads(buf[off:off + hlen].decode("utf-8"))
    off += hlen
    groups = []
    for _ in range(4):
        g, off = _read_group(buf, off)
        groups.append(g)
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after final group (at byte {off})")
    return Checkpoint(header, *groups)


def check_arch(stored: dict, expected: dict):
    for key, want in expected.items():
        got = stored.get(key)
        if got != want:
            raise CheckpointMismatchError(
                f"checkpoint architecture mismatch on {key!r}: "
                f"stored {got!r} vs requested {want!r}")


def params_as_dict(model) -> dict:
    return {p.name: p.data.copy() for p in model.parameters()}


def load_params_into(model, params: dict, allow_missing: tuple = (),
                     allow_extra: tuple = ()):
    """Copy arrays into the model by parameter name.

    ``allow_missing``: model-name prefixes that may be absent from ``params``
    (kept at their fresh initialization). ``allow_extra``: stored-name
    prefixes that may have no destination (dropped heads).
    """
    own = {p.name: p for p in model.parameters()}
    for name, p in own.items():
        if name in params:
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise CheckpointMismatchError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
        elif not any(name.startswith(pre) for pre in allow_missing):
            raise CheckpointError(f"checkpoint missing parameter {name}")
    for name in params:
        if name not in own and not any(name.startswith(pre) for pre in allow_extra):
            raise CheckpointError(f"checkpoint has unknown parameter {name}")

"""Layered plain-text run configuration.

A config file holds ``section.key = value`` lines (# comments allowed).
Sections map onto the dataclasses that drive each component: data.*,
frontend.*, model.*, daycal.*, ctc.*, train.*, gen.*. Later files and
command-line ``--set`` overrides win. Unknown keys are hard errors, and
every run writes its fully resolved config next to its outputs.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .ctc import CTCConfig
from .daycal import DayCalConfig
from .frontend import FrontEndConfig
from .rescoring import GenerationConfig
from .seq2seq import ModelConfig
from .synthdata import CorpusConfig
from .trainer import TrainConfig

ENV_CONFIG = "NEUROSEQ_CONFIG"


class ConfigKeyError(ValueError):
    pass


SECTIONS = {
    "data": CorpusConfig,
    "frontend": FrontEndConfig,
    "model": ModelConfig,
    "daycal": DayCalConfig,
    "ctc": CTCConfig,
    "train": TrainConfig,
    "gen": GenerationConfig,
}


@dataclass
class RunConfig:
    data: CorpusConfig = field(default_factory=CorpusConfig)
    frontend: FrontEndConfig = field(default_factory=FrontEndConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    daycal: DayCalConfig = field(default_factory=DayCalConfig)
    ctc: CTCConfig = field(default_factory=CTCConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenerationConfig = field(default_factory=GenerationConfig)

    def section(self, name: str):
        return getattr(self, name)


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigKeyError(f"cannot parse boolean for {key}: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    if typ is tuple:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    raise ConfigKeyError(f"unsupported field type for {key}")


def parse_kv_lines(text: str, source: str = "<config>") -> dict:
    """key=value lines -> dict; raises on malformed lines."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigKeyError(f"{source}:{lineno}: expected key = value, "
                                 f"got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        out[key.strip()] = raw.strip()
    return out


def apply_kv(run: RunConfig, kv: dict) -> RunConfig:
    updates: dict[str, dict] = {}
    for key, raw in kv.items():
        if "." not in key:
            raise ConfigKeyError(f"unknown config key {key!r} "
                                 f"(expected section.field)")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigKeyError(f"unknown config section {section!r} in {key!r}")
        cls = SECTIONS[section]
        typemap = {f.name: f.type for f in fields(cls)}
        pymap = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        if name not in typemap:
            raise ConfigKeyError(f"unknown config key {key!r}")
        updates.setdefault(section, {})[name] = _parse_value(raw, pymap[name], key)
    for section, vals in updates.items():
        run = replace(run, **{section: replace(run.section(section), **vals)})
    return run


def resolve(config_paths=(), overrides=(), use_env: bool = True) -> RunConfig:
    """Defaults <- env config file <- given files <- --set overrides."""
    run = RunConfig()
    paths = []
    env = os.environ.get(ENV_CONFIG)
    if use_env and env:
        paths.append(env)
    paths.extend(config_paths)
    for p in paths:
        text = Path(p).read_text(encoding="utf-8")
        run = apply_kv(run, parse_kv_lines(text, source=str(p)))
    merged: dict[str, str] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigKeyError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        merged[k.strip()] = v.strip()
    if merged:
        run = apply_kv(run, merged)
    return run


def render(run: RunConfig) -> str:
    """Full resolved configuration as stable key = value text."""
    lines = []
    for section in sorted(SECTIONS):
        vals = asdict(run.section(section))
        for name in sorted(vals):
            v = vals[name]
            if isinstance(v, tuple) or isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{name} = {v}")
    return "\n".join(lines) + "\n"


def write_resolved(run: RunConfig, outdir, tool_version: str):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "resolved_config.txt").write_text(
        f"# neuroseq {tool_version}\n" + render(run), encoding="utf-8")

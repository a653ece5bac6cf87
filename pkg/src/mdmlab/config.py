"""Run configuration: nested dataclasses loaded from YAML with strict keys."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .curriculum import CurriculumConfig
from .decoder import DecodeConfig
from .model import ModelConfig
from .sft import SFTConfig
from .tasks import VOCAB, DatasetSpec, SequenceLayout
from .tracerl import TrainConfig


@dataclass
class RLConfig:
    block_size: int = 2
    n_batches: int = 24
    val_every: int = 4
    val_size: int = 200


@dataclass
class EvalConfig:
    split: str = "validation"
    size: int = 0          # 0: whole split
    n: int = 3
    k: tuple[int, ...] = (1, 3)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=len(VOCAB), max_len=16))
    layout: SequenceLayout = field(default_factory=lambda: SequenceLayout(8, 8))
    data: DatasetSpec = field(default_factory=lambda: DatasetSpec(count=5000, answer_width=3))
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sft: SFTConfig = field(default_factory=SFTConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        if self.model.vocab_size != len(VOCAB):
            raise ValueError(f"model.vocab_size must be {len(VOCAB)} for the char vocabulary")
        if self.model.mask_token_id != VOCAB.MASK:
            raise ValueError(f"model.mask_token_id must be {VOCAB.MASK}")
        if self.layout.length > self.model.max_len:
            raise ValueError("layout.prompt_len + layout.response_len exceeds model.max_len")
        if self.curriculum.Bhat > self.layout.response_len:
            raise ValueError("curriculum.Bhat exceeds layout.response_len")
        if self.train.group_size < 2:
            raise ValueError("train.group_size must be >= 2")
        return self


class ConfigError(ValueError):
    pass


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for k, v in data.items():
        hint = hints[k]
        sub = f"{where}.{k}" if where else k
        if dataclasses.is_dataclass(hint):
            v = _build(hint, v, sub)
        elif typing.get_origin(hint) is tuple and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Load YAML (or defaults when ``path`` is None) and apply ``a.b=value`` overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from None
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key.sub=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return x
    return clean(asdict(cfg))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)

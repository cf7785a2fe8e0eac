"""Experiment configuration as flat ``dotted.key = value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .optim import TrainConfig
from .ulm import ULMConfig


@dataclass
class TaskSection:
    kind: str = "cls_single"
    seed: int = 0
    train_size: int = 0  # 0 -> generator default
    valid_size: int = 0
    test_size: int = 0


@dataclass
class CorpusSection:
    size: int = 4000
    valid_size: int = 200
    seed: int = 0
    topics: int = 8
    branching: int = 4


@dataclass
class PretrainSection:
    steps: int = 3000
    lr: float = 3e-3
    batch_size: int = 16
    seed: int = 0


@dataclass
class PromptSection:
    method: str = "prompt_tune"  # prompt_tune | finetune_lm
    mode: str = "deep"           # input | deep
    length: int = 4
    seed: int = 0


@dataclass
class GenSection:
    max_new_units: int = 0  # 0 -> longest training answer + 8


@dataclass
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    ulm: ULMConfig = field(default_factory=ULMConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=6e-2, steps=6000, patience=0, schedule="linear"))
    gen: GenSection = field(default_factory=GenSection)
    seeds: str = "0,1,2"

    def validate(self) -> None:
        if self.prompt.method not in ("prompt_tune", "finetune_lm"):
            raise ValueError(f"prompt.method must be prompt_tune or finetune_lm, got {self.prompt.method!r}")
        if self.prompt.mode not in ("input", "deep"):
            raise ValueError(f"prompt.mode must be input or deep, got {self.prompt.mode!r}")
        if self.prompt.method == "prompt_tune" and not 1 <= self.prompt.length < self.ulm.max_len:
            raise ValueError(f"prompt.length {self.prompt.length} out of range")
        expected = "prompt_tune" if self.prompt.method == "prompt_tune" else "finetune_lm"
        if self.train.mode != expected:
            self.train = dataclasses.replace(self.train, mode=expected)
        self.seed_list()

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ValueError(f"seeds must be a comma-separated integer list, got {self.seeds!r}") from None


def _convert(value: str, kind, key: str):
    kind = {"int": int, "float": float, "str": str, "bool": bool}.get(kind, kind)
    try:
        if kind is bool:
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ValueError(f"config key {key}: cannot parse {value!r} as {kind.__name__}") from None


def to_flat(cfg: ExperimentConfig) -> dict[str, str]:
    flat = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = str(getattr(value, sub.name))
        else:
            flat[f.name] = str(value)
    return flat


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


def from_flat(pairs: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    updates: dict[str, dict] = {}
    for key, raw in pairs.items():
        head, _, tail = key.partition(".")
        if head not in sections:
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(cfg, head)
        if not tail:
            if dataclasses.is_dataclass(current):
                raise ValueError(f"config key {key!r} names a section, not a value")
            setattr(cfg, head, _convert(raw, type(current), key))
            continue
        if not dataclasses.is_dataclass(current):
            raise ValueError(f"unknown config key {key!r}")
        sub = {f.name: f for f in dataclasses.fields(current)}
        if tail not in sub:
            raise ValueError(f"unknown config key {key!r}")
        updates.setdefault(head, {})[tail] = _convert(raw, type(getattr(current, tail)), key)
    for head, values in updates.items():
        setattr(cfg, head, dataclasses.replace(getattr(cfg, head), **values))
    cfg.validate()
    return cfg


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return from_flat(pairs, base)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))

"""Run configuration: a flat ``section.key = value`` text file.

Sections are ``data.`` (corpus generator), ``model.``, ``train.`` and
``paths.``; the bare key ``seed`` is the root seed that every random stream
derives from. Unknown keys are errors so typos never pass silently.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import SynthConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    corpus_dir: str = "data"
    checkpoint_dir: str = "run"
    report_dir: str = "run"


_SECTIONS = {"data": SynthConfig, "model": ModelConfig, "train": TrainConfig, "paths": Paths}


@dataclass
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)
    seed: int = 0

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            data=dataclasses.replace(self.data, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def dumps(self) -> str:
        lines = [f"seed = {self.seed}"]
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                if section in ("data", "train") and f.name == "seed":
                    continue  # always the root seed
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, source: str = "<string>") -> "RunConfig":
        values: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
        seed = 0
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (part.strip() for part in line.partition("="))
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            if key == "seed":
                seed = _parse(value, int, key, source, lineno)
                continue
            section, _, name = key.partition(".")
            if section not in _SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section in {key!r}")
            types = {f.name: f for f in dataclasses.fields(_SECTIONS[section])}
            if name not in types or name == "seed":
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            default = types[name].default
            values[section][name] = _parse(value, type(default), key, source, lineno, default)
        cfg = cls(**{s: _SECTIONS[s](**kw) for s, kw in values.items()}).with_seed(seed)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.data.validate()
            self.train.validate()
            if self.model.d_model % self.model.heads:
                raise ValueError(f"model.d_model={self.model.d_model} not divisible by heads={self.model.heads}")
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        return cls.loads(text, str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, kind: type, key: str, source: str, lineno: int, default=None):
    try:
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if kind is tuple:
            items = tuple(int(v) for v in text.split(","))
            if default is not None and len(items) != len(default):
                raise ValueError(text)
            return items
        return kind(text)
    except ValueError:
        raise ConfigError(f"{source}:{lineno}: bad value {text!r} for {key}") from None

"""Run configuration: one JSON file with audio, model, train and paths sections."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from .audio import AudioConfig
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = {"audio": AudioConfig, "model": ModelConfig, "train": TrainConfig}
PATH_KEYS = ("data", "run_dir", "init", "lexicon")


class ConfigError(ValueError):
    pass


def _build(cls, values: Mapping[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        unknown = sorted(set(d) - set(SECTIONS) - {"paths"})
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        paths = dict(d.get("paths", {}))
        bad = sorted(set(paths) - set(PATH_KEYS))
        if bad:
            raise ConfigError(f"unknown keys in [paths]: {', '.join(bad)}")
        built = {name: _build(c, d.get(name, {}), name) for name, c in SECTIONS.items()}
        return cls(paths=paths, **built)

    def to_dict(self) -> dict:
        return {"audio": self.audio.to_dict(), "model": self.model.to_dict(), "train": self.train.to_dict(),
                "paths": dict(self.paths)}

    def override(self, assignments: Iterable[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, else as plain strings."""
        d = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot or not name:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            if section not in d:
                raise ConfigError(f"unknown config section {section!r} in override {item!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            d[section][name] = value
        return RunConfig.from_dict(d)

    def with_paths(self, **paths) -> "RunConfig":
        merged = dict(self.paths)
        merged.update({k: str(v) for k, v in paths.items() if v is not None})
        return replace(self, paths=merged)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = RunConfig.from_dict(raw)
    return cfg.override(overrides) if overrides else cfg

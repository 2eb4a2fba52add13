"""Flat ``section.key = value`` run configuration.

Defaults come from the model, training and data dataclasses; a config file
overrides them and command-line flags override the file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .autograd import ContractError
from .model import ModelConfig
from .synthetic import DataConfig
from .train import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}
EXTRA = {"data.seed": 0}


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    flat = {}
    for name, cls in SECTIONS.items():
        for key, value in asdict(cls()).items():
            flat[f"{name}.{key}"] = value
    flat.update(EXTRA)
    return flat


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(x) for x in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=_defaults)

    @classmethod
    def resolve(cls, path: Optional[str] = None, overrides: Optional[dict] = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            cfg.update(parse_config_text(Path(path).read_text(), str(path)))
        cfg.update(overrides or {})
        cfg.build()  # validate early
        return cfg

    def update(self, raw: dict) -> None:
        for key, value in raw.items():
            if key not in self.values:
                raise ConfigError(f"unknown config key {key!r}")
            default = self.values[key]
            self.values[key] = _coerce(key, value, default) if isinstance(value, str) else value

    def section(self, name: str) -> dict:
        prefix = name + "."
        names = {f.name for f in fields(SECTIONS[name])}
        return {k[len(prefix):]: v for k, v in self.values.items()
                if k.startswith(prefix) and k[len(prefix):] in names}

    def build(self) -> tuple[ModelConfig, TrainConfig, DataConfig]:
        try:
            return tuple(SECTIONS[name](**self.section(name)) for name in ("model", "train", "data"))
        except (ContractError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def model(self) -> ModelConfig:
        return self.build()[0]

    @property
    def train(self) -> TrainConfig:
        return self.build()[1]

    @property
    def data(self) -> DataConfig:
        return self.build()[2]

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.values.items())

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / "config.txt"
        path.write_text(self.to_text())
        return path

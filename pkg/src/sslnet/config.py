"""Run configuration: one YAML (or JSON) file, validated before any work starts."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dsp import SpectralConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .synth import SynthSpec
from .trainer import TrainConfig


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "pseudo"
    d_emb: int = 256
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("pseudo", "file"):
            raise ConfigError(f"provider.kind: expected 'pseudo' or 'file', got {self.kind!r}")
        if self.d_emb < 1:
            raise ConfigError(f"provider.d_emb: must be >= 1, got {self.d_emb}")


@dataclass(frozen=True)
class ModelOptions:
    head_hidden: int = 64
    branches: str = "both"

    def __post_init__(self):
        if self.head_hidden < 1:
            raise ConfigError(f"model.head_hidden: must be >= 1, got {self.head_hidden}")
        if self.branches not in ("both", "spectral", "learned"):
            raise ConfigError(f"model.branches: unknown value {self.branches!r}")


@dataclass(frozen=True)
class SweepOptions:
    budgets: tuple[int, ...] = (10, 50, 200)
    variants: tuple[str, ...] = ("fixed", "shared", "sampling")
    split: str = "test"


@dataclass(frozen=True)
class Paths:
    manifest: str | None = None
    features: str | None = None
    embeddings: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    sweep: SweepOptions = field(default_factory=SweepOptions)
    synth: SynthSpec = field(default_factory=SynthSpec)
    paths: Paths = field(default_factory=Paths)


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _coerce(section: str, key: str, value, annotation: str):
    where = f"{section}.{key}"
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(f"{where}: value required")
    if annotation.startswith("int") and not annotation.startswith("int |"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif annotation.startswith("int |"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer or null, got {value!r}")
    elif annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif annotation.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif annotation.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        value = tuple(value)
    elif annotation == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def build_section(name: str, values: dict | None, base=None):
    """Build one section from a mapping, rejecting unknown keys by full name."""
    cls = SECTIONS[name]
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key {name}.{unknown[0]}")
    kwargs = dataclasses.asdict(base) if base is not None else {}
    for key, value in values.items():
        kwargs[key] = _coerce(name, key, value, str(fields[key].type))
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(name) else f"{name}: {msg}") from None


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]}")
    return RunConfig(**{name: build_section(name, raw.get(name)) for name in SECTIONS})


def load_config(path=None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"config {path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path}: not valid YAML/JSON ({exc})") from exc
    return config_from_dict(raw)


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Flag overrides win over file values; ``None`` means "flag not given"."""
    given = {k: v for k, v in values.items() if v is not None}
    if not given:
        return cfg
    return dataclasses.replace(cfg, **{section: build_section(section, given, getattr(cfg, section))})

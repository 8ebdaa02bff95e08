"""Run configuration: a flat ``key = value`` text format with one section per module config."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .convnet import TrainConfig
from .filters import FrangiConfig, PhaseCongruencyConfig
from .gbm import GbmConfig
from .pipeline import EXPERIMENT_GBM, ExperimentConfig, LabelConfig, SweepConfig
from .synthdata import PhantomParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    train: int = 40
    val: int = 20
    threshold: float = 0.40  # filter-change threshold

    def __post_init__(self):
        if self.train < 1 or self.val < 1:
            raise ValueError("train and val sizes must be at least 1")


@dataclass(frozen=True)
class PretrainConfig:
    patches: int = 500
    classes: int = 4
    batch_size: int = 20
    momentum: float = 0.5
    weight_decay: float = 5e-4
    learning_rate: float = 0.05
    epochs: int = 20
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.momentum, self.weight_decay, self.learning_rate, self.epochs, self.seed)


SECTIONS = {
    "run": RunSection,
    "phantom": PhantomParams,
    "pretrain": PretrainConfig,
    "adapt": TrainConfig,
    "sweep": SweepConfig,
    "labels": LabelConfig,
    "gbm": GbmConfig,
    "frangi": FrangiConfig,
    "phase_congruency": PhaseCongruencyConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    phantom: PhantomParams = field(default_factory=PhantomParams)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    gbm: GbmConfig = EXPERIMENT_GBM
    frangi: FrangiConfig = field(default_factory=FrangiConfig)
    phase_congruency: PhaseCongruencyConfig = field(default_factory=PhaseCongruencyConfig)

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(self.sweep, self.labels, self.adapt, self.gbm, self.run.seed)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value)


def _parse(text: str, default):
    text = text.strip()
    if default is None:
        return None if text.lower() == "none" else float(text)
    if isinstance(default, bool):
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return text.lower() == "true"
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in text.split(",") if v.strip())
    if isinstance(default, int):
        return int(text)
    return float(text)


def dumps(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def loads(text: str) -> RunConfig:
    """Parse config text; missing keys take defaults, unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    parts = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        defaults = getattr(RunConfig(), name)
        known = {f.name for f in dataclasses.fields(defaults)}
        values = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                values[key] = _parse(raw, getattr(defaults, key))
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
        try:
            parts[name] = dataclasses.replace(defaults, **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return RunConfig(**parts)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))

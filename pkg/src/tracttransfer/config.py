"""Experiment configuration: dataclass defaults plus INI-style config files.

The default configuration is the desk-scale benchmark preset: the full shot
grid, all five strategies, ten repeat seeds per cell, and a training recipe
sized so the whole benchmark finishes in minutes on a laptop CPU.  Fields
not present in a config file keep their defaults, so a file only states what
it changes.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .synthdata import CohortConfig
from .train import SelectionMetric, TrainOptions
from .transfer import FitOptions, TransferStrategy

DEFAULT_SHOT_GRID = [(1, 0), (3, 1), (5, 2)]


def default_train_options() -> TrainOptions:
    """Fine-tuning recipe for benchmark strategy runs."""
    return TrainOptions(learning_rate=0.01, epochs=36, batch=1,
                        warmup_epochs=600, warmup_patience=100)


def default_pretrain_options() -> TrainOptions:
    """Existing-tract pretraining recipe."""
    return TrainOptions(learning_rate=0.03, epochs=150, batch=6)


@dataclass
class ExperimentConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    train: TrainOptions = field(default_factory=default_train_options)
    pretrain: TrainOptions = field(default_factory=default_pretrain_options)
    fit: FitOptions = field(default_factory=FitOptions)
    strategies: list[TransferStrategy] = field(
        default_factory=lambda: list(TransferStrategy))
    shot_grid: list[tuple[int, int]] = field(
        default_factory=lambda: list(DEFAULT_SHOT_GRID))
    repeats: int = 10
    seed: int = 7
    threshold: float = 0.5
    workers: int = 0  # 0 = use available cores, capped at 8
    # the abundant-data model sees every subject once per epoch, so its
    # optimizer takes many more steps per epoch than the few-shot runs and
    # converges in fewer epochs; a separate budget keeps the grid affordable
    upper_bound_epochs: int = 24

    def validate(self) -> None:
        self.cohort.validate()
        self.train.validate()
        self.pretrain.validate()
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {self.repeats}")
        if not self.strategies:
            raise ConfigurationError("at least one strategy is required")
        if not self.shot_grid:
            raise ConfigurationError("shot_grid must not be empty")
        for k_train, k_val in self.shot_grid:
            if not 1 <= k_train <= self.cohort.fewshot_train:
                raise ConfigurationError(
                    f"shot cell ({k_train},{k_val}) exceeds the few-shot train pool "
                    f"of {self.cohort.fewshot_train}")
            if not 0 <= k_val <= self.cohort.fewshot_val:
                raise ConfigurationError(
                    f"shot cell ({k_train},{k_val}) exceeds the few-shot val pool "
                    f"of {self.cohort.fewshot_val}")


def _apply_section(obj, section: configparser.SectionProxy, label: str):
    converters = {int: int, float: float, bool: lambda s: s.lower() in ("1", "true", "yes")}
    valid = {f.name: f.type for f in fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key not in valid:
            raise ConfigurationError(f"unknown key {key!r} in section [{label}]")
        current = getattr(obj, key)
        if isinstance(current, bool):
            updates[key] = converters[bool](raw)
        elif isinstance(current, int):
            updates[key] = int(raw)
        elif isinstance(current, float):
            updates[key] = float(raw)
        elif isinstance(current, SelectionMetric):
            updates[key] = SelectionMetric(raw)
        elif current is None and key == "batch":
            updates[key] = None if raw.lower() in ("none", "full") else int(raw)
        else:
            raise ConfigurationError(f"cannot parse key {key!r} in section [{label}]")
    return replace(obj, **updates)


def _parse_shot_grid(raw: str) -> list[tuple[int, int]]:
    cells = []
    for token in filter(None, (t.strip() for t in raw.split(","))):
        try:
            k_train, k_val = token.split("/")
            cells.append((int(k_train), int(k_val)))
        except ValueError:
            raise ConfigurationError(
                f"bad shot grid cell {token!r}; expected k_train/k_val") from None
    return cells


def load_config(path=None) -> ExperimentConfig:
    """Default configuration, updated by the sections of an INI file if given."""
    config = ExperimentConfig()
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    for section in parser.sections():
        if section == "cohort":
            config.cohort = _apply_section(config.cohort, parser[section], section)
        elif section == "train":
            config.train = _apply_section(config.train, parser[section], section)
        elif section == "pretrain":
            config.pretrain = _apply_section(config.pretrain, parser[section], section)
        elif section == "fit":
            config.fit = _apply_section(config.fit, parser[section], section)
        elif section == "benchmark":
            for key, raw in parser[section].items():
                if key == "strategies":
                    config.strategies = [TransferStrategy.parse(s.strip())
                                         for s in raw.split(",") if s.strip()]
                elif key == "shot_grid":
                    config.shot_grid = _parse_shot_grid(raw)
                elif key in ("repeats", "seed", "workers", "upper_bound_epochs"):
                    setattr(config, key, int(raw))
                elif key == "threshold":
                    config.threshold = float(raw)
                else:
                    raise ConfigurationError(f"unknown key {key!r} in section [benchmark]")
        else:
            raise ConfigurationError(f"unknown config section [{section}]")
    return config


def render_config(config: ExperimentConfig) -> str:
    """Canonical textual form used for hashing and provenance."""
    lines = []
    for label, obj in (("cohort", config.cohort), ("train", config.train),
                       ("pretrain", config.pretrain), ("fit", config.fit)):
        lines.append(f"[{label}]")
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, SelectionMetric):
                value = value.value
            lines.append(f"{f.name} = {value}")
    lines.append("[benchmark]")
    lines.append("strategies = " + ",".join(s.value for s in config.strategies))
    lines.append("shot_grid = " + ",".join(f"{a}/{b}" for a, b in config.shot_grid))
    for key in ("repeats", "seed", "threshold", "workers", "upper_bound_epochs"):
        lines.append(f"{key} = {getattr(config, key)}")
    return "\n".join(lines) + "\n"


def config_digest(config: ExperimentConfig) -> str:
    return hashlib.sha256(render_config(config).encode("utf-8")).hexdigest()[:16]

"""Run configuration: one flat key = value file, overridable from the CLI.

Defaults reproduce the pipeline's fixed constants (neighbor counts, heatmap
width and peak, per-step sampling counts, augmentation factor, optimizer
settings, graph-cut weights). Every run writes its resolved config next to
its outputs so an experiment can be re-run from the artifact alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

ADJACENCY_MODES = ("static", "dynamic")


@dataclass
class RunConfig:
    # graph-cut energy
    lam: float = 10.0
    convex_multiplier: float = 30.0
    # neighbor graphs
    k_small: int = 6
    k_large: int = 12
    adjacency: str = "static"
    # heatmap encoding
    sigma: float = 5.0
    peak: float = 1.0
    # per-step cell sampling
    seg_subsample: int = 9000
    roi_subsample: int = 1000
    # decimation target for preprocessing
    target_cells: int = 4500
    # augmentation
    augment_count: int = 20
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # training schedule
    seg_epochs: int = 30
    lmk_epochs: int = 30
    val_every: int = 2
    patience: int = 5
    # SVM upsampler
    svm_c: float = 10.0
    # evaluation; an eval run exits nonzero when pooled metrics miss these
    folds: int = 6
    val_count: int = 6
    stages: int = 2
    min_dsc: float = 0.0
    max_mae: float = float("inf")
    # synthesis
    synth_count: int = 36
    synth_cells: int = 12000
    # seeds
    seed: int = 0
    # paths
    data_dir: str = "data"
    run_dir: str = "runs/run0"

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lam must be nonnegative, got {self.lam}")
        if self.adjacency not in ADJACENCY_MODES:
            raise ConfigError(
                f"adjacency must be one of {ADJACENCY_MODES}, got {self.adjacency!r}"
            )
        if self.stages not in (1, 2):
            raise ConfigError(f"stages must be 1 or 2, got {self.stages}")
        for name in ("k_small", "k_large", "seg_subsample", "roi_subsample",
                     "augment_count", "seg_epochs", "lmk_epochs", "synth_count",
                     "target_cells", "synth_cells"):
            if getattr(self, name) < 1 and name != "augment_count":
                raise ConfigError(f"{name} must be positive")
        if self.augment_count < 0:
            raise ConfigError("augment_count must be nonnegative")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _convert(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    if raw and raw[0] in "\"'" and raw[-1] == raw[0] and len(raw) >= 2:
        raw = raw[1:-1]
    kind = _FIELDS[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from err


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        values[key] = _convert(key, raw.split("#", 1)[0])
    config = RunConfig(**values)
    config.validate()
    return config


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def apply_overrides(config: RunConfig, overrides: list) -> RunConfig:
    """key=value strings from the command line; same typing as the file."""
    values = dataclasses.asdict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        values[key.strip()] = _convert(key.strip(), raw)
    out = RunConfig(**values)
    out.validate()
    return out


def format_config(config: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(config, f.name)
        if isinstance(value, str):
            value = f'"{value}"'
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def write_config(config: RunConfig, path) -> None:
    Path(path).write_text(format_config(config))

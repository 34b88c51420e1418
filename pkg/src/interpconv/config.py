"""Run configuration: one TOML file, dotted --set overrides, full validation.

Every command echoes the fully resolved configuration into its output manifest
so runs can be reproduced from the artifacts alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class DatasetSection:
    path: str = "data"
    image_size: int = 64
    categories: int = 4
    train_per_category: int = 400
    test_per_category: int = 100
    jitter: int = 8
    clutter: int = 6
    seed: int | None = None


@dataclass
class NetworkSection:
    preset: str = "reference"
    interpretable: bool = True
    loss: str = "softmax"              # softmax | logistic
    conv1_channels: int = 16
    conv2_channels: int = 32
    interp_filters: int = 32
    tau: float | None = None           # default 0.5/n^2
    beta: float = 4.0
    alpha: float | None = None         # default n^2/(1+n^2)


@dataclass
class TrainSection:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    seed: int | None = None
    lambda_coeff: float = 5e-6
    ema_rate: float = 0.1
    warmup_epochs: int = 1
    px_mode: str = "mean"              # mean | exact
    lambda_per_filter: bool = False
    lr_decay_epochs: int = 0
    lr_decay_factor: float = 0.1
    log_subset: int = 128


@dataclass
class EvalSection:
    iou_threshold: float = 0.2
    top_n: int = 100
    dilation_radius: int = 0
    viz_filters: int = 8
    viz_images: int = 4
    checkpoint: str = ""               # defaults to <out_dir>/checkpoint.icnn


@dataclass
class RunConfig:
    out_dir: str = "out"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolved(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "dataset": DatasetSection,
    "network": NetworkSection,
    "train": TrainSection,
    "eval": EvalSection,
}


def _coerce(section: object, key: str, value: object) -> object:
    fields = {f.name: f for f in dataclasses.fields(section)}
    if key not in fields:
        raise ConfigError(f"unknown key {key!r} in [{type(section).__name__}]")
    current = getattr(section, key)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(f"{key} expects a boolean, got {value!r}")
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _parse_override_value(text: str) -> object:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_run_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {p}: {e}") from e
    cfg = RunConfig()
    for key, value in raw.items():
        if key == "out_dir":
            if not isinstance(value, str):
                raise ConfigError("out_dir must be a string")
            cfg.out_dir = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            section = getattr(cfg, key)
            for k, v in value.items():
                setattr(section, k, _coerce(section, k, v))
        else:
            raise ConfigError(f"unknown config section {key!r}")
    for text in overrides or []:
        if "=" not in text:
            raise ConfigError(f"override {text!r} is not key=value")
        dotted, _, val = text.partition("=")
        parts = dotted.strip().split(".")
        value = _parse_override_value(val.strip())
        if len(parts) == 1 and parts[0] == "out_dir":
            cfg.out_dir = str(value)
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            section = getattr(cfg, parts[0])
            setattr(section, parts[1], _coerce(section, parts[1], value))
        else:
            raise ConfigError(f"override path {dotted!r} not recognized")
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.network.loss not in ("softmax", "logistic"):
        raise ConfigError(f"unknown loss {cfg.network.loss!r}")
    if cfg.network.preset != "reference":
        raise ConfigError(f"unknown network preset {cfg.network.preset!r}")
    if cfg.train.px_mode not in ("mean", "exact"):
        raise ConfigError(f"unknown px_mode {cfg.train.px_mode!r}")
    if not (0.0 < cfg.train.ema_rate <= 1.0):
        raise ConfigError("train.ema_rate must be in (0, 1]")
    if cfg.train.lambda_coeff < 0:
        raise ConfigError("train.lambda_coeff must be >= 0")
    if cfg.train.epochs < 1:
        raise ConfigError("train.epochs must be >= 1")
    if cfg.train.batch_size < 1:
        raise ConfigError("train.batch_size must be >= 1")
    if cfg.eval.top_n < 2:
        raise ConfigError("eval.top_n must be >= 2")
    if cfg.dataset.image_size < 32:
        raise ConfigError("dataset.image_size must be >= 32")


def require_seed(cfg: RunConfig, which: str) -> int:
    """Seeds are mandatory: commands fail fast instead of inventing one."""
    value = cfg.dataset.seed if which == "dataset" else cfg.train.seed
    if value is None:
        raise ConfigError(f"{which}.seed is required for this command")
    return int(value)

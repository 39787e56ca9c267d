"""Experiment configuration: a YAML (or JSON) file with strict keys.

Unknown keys anywhere are rejected so a typo never silently falls back to a
default. Missing keys take the defaults below; ``batch_size`` and
``optimizer.learning_rate`` default per dataset / model.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .dof import DEFAULT_PROJECTION_FACTOR, DEFAULT_TAU
from .errors import ConfigError
from .nn import MODEL_NAMES, build_model

DATASETS = {"mnist": 10, "cifar10": 10, "cifar100": 100}
DEFAULT_BATCH = {"mnist": 128, "cifar10": 256, "cifar100": 128}
DEFAULT_LR = {"cnn_mnist": 0.01, "lenet": 0.05, "alexnet_scaled": 0.015}
ESTIMATORS = ("dof", "rank")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float | None = None
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class MiaConfig:
    enabled: bool = False
    n_per_class: int = 1000
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 64
    hidden: int = 128
    standardize: bool = True


@dataclass
class ExperimentConfig:
    model: str = "cnn_mnist"
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    epochs: int = 20
    batch_size: int | None = None
    probe_batch_size: int = 256
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    tau: float = DEFAULT_TAU
    tau_overrides: dict[str, float] = field(default_factory=dict)
    projection_factor: float = DEFAULT_PROJECTION_FACTOR
    seed: int = 0
    layers: list[str] | None = None
    limit_train: int | None = None
    limit_test: int | None = None
    estimators: list[str] = field(default_factory=lambda: list(ESTIMATORS))
    rank_mode: str = "parallel"
    mia: MiaConfig = field(default_factory=MiaConfig)

    @property
    def num_classes(self) -> int:
        return DATASETS[self.dataset]

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size if self.batch_size is not None else DEFAULT_BATCH[self.dataset]

    @property
    def effective_learning_rate(self) -> float:
        lr = self.optimizer.learning_rate
        return lr if lr is not None else DEFAULT_LR[self.model]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        validate(cfg)
        return cfg


_NESTED = {"optimizer": OptimizerConfig, "mia": MiaConfig}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(known))}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(key) if cls is ExperimentConfig else None
        kwargs[key] = _build(sub, value, key) if sub else value
    return cls(**kwargs)


def _check_type(name, value, kinds, allow_none=False):
    if value is None and allow_none:
        return
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"{name} must be {'/'.join(k.__name__ for k in kinds)}, got a boolean")
    if not isinstance(value, kinds):
        raise ConfigError(f"{name} must be {'/'.join(k.__name__ for k in kinds)}, got {value!r}")


def validate(cfg: ExperimentConfig) -> None:
    if cfg.model not in MODEL_NAMES:
        raise ConfigError(f"unknown model {cfg.model!r}; choose from {', '.join(MODEL_NAMES)}")
    if cfg.dataset not in DATASETS:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}; choose from {', '.join(DATASETS)}")
    _check_type("data_dir", cfg.data_dir, (str,))
    for name in ("epochs", "probe_batch_size", "seed"):
        _check_type(name, getattr(cfg, name), (int,))
    for name in ("batch_size", "limit_train", "limit_test"):
        _check_type(name, getattr(cfg, name), (int,), allow_none=True)
    if cfg.epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {cfg.epochs}")
    if cfg.probe_batch_size < 2:
        raise ConfigError(f"probe_batch_size must be >= 2, got {cfg.probe_batch_size}")
    if cfg.batch_size is not None and cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {cfg.batch_size}")
    for name in ("limit_train", "limit_test"):
        v = getattr(cfg, name)
        if v is not None and v < 1:
            raise ConfigError(f"{name} must be >= 1, got {v}")
    _check_type("tau", cfg.tau, (int, float))
    if not 0.0 < cfg.tau < 1.0:
        raise ConfigError(f"tau must lie in (0, 1), got {cfg.tau}")
    _check_type("tau_overrides", cfg.tau_overrides, (dict,))
    for layer, t in cfg.tau_overrides.items():
        _check_type(f"tau_overrides.{layer}", t, (int, float))
        if not 0.0 < t < 1.0:
            raise ConfigError(f"tau_overrides.{layer} must lie in (0, 1), got {t}")
    _check_type("projection_factor", cfg.projection_factor, (int, float))
    if not 0.0 < cfg.projection_factor <= 1.0:
        raise ConfigError(f"projection_factor must lie in (0, 1], got {cfg.projection_factor}")
    if cfg.layers is not None:
        _check_type("layers", cfg.layers, (list,))
        available = build_model(cfg.model, cfg.num_classes).probes
        unknown = [name for name in cfg.layers if name not in available]
        if unknown:
            raise ConfigError(f"{cfg.model} has no probe point(s) {unknown}; "
                              f"available: {', '.join(available)}")
    _check_type("estimators", cfg.estimators, (list,))
    bad = [e for e in cfg.estimators if e not in ESTIMATORS]
    if bad:
        raise ConfigError(f"unknown estimator(s) {bad}; choose from {', '.join(ESTIMATORS)}")
    if cfg.rank_mode not in ("parallel", "sequential"):
        raise ConfigError(f"rank_mode must be 'parallel' or 'sequential', got {cfg.rank_mode!r}")
    opt = cfg.optimizer
    if opt.kind not in ("adam", "sgd-momentum"):
        raise ConfigError(f"optimizer.kind must be 'adam' or 'sgd-momentum', got {opt.kind!r}")
    _check_type("optimizer.learning_rate", opt.learning_rate, (int, float), allow_none=True)
    if opt.learning_rate is not None and opt.learning_rate <= 0:
        raise ConfigError(f"optimizer.learning_rate must be positive, got {opt.learning_rate}")
    mia = cfg.mia
    _check_type("mia.enabled", mia.enabled, (bool,))
    for name in ("n_per_class", "epochs", "batch_size", "hidden"):
        _check_type(f"mia.{name}", getattr(mia, name), (int,))
        if getattr(mia, name) < 1:
            raise ConfigError(f"mia.{name} must be >= 1")
    _check_type("mia.learning_rate", mia.learning_rate, (int, float))


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {}, "")
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: not valid {'JSON' if path.suffix == '.json' else 'YAML'}: {exc}") from None
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

"""Flat run configuration read from ``key = value`` files and overridden by flags."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    input: str = ""
    sep: str = "comma"
    fraction: float = 1.0
    min_occurrence: int = 5
    min_session_len: int = 3
    split_seed: int = 0
    data_dir: str = ""
    # training
    learning_rate: float = 0.001
    lr_decay_step_epochs: int = 3
    lr_decay_factor: float = 0.1
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    # model
    dim: int = 128
    pos_dim: int = 0  # 0 means "same as dim"
    layers: int = 2
    max_prefix_len: int = 50
    init_std: float = 0.1
    leaky_slope: float = 0.2
    position_mode: str = "reversed"
    message_activation: str = "sigmoid"
    share_relation_params: bool = False
    loss: str = "ce"
    softmax_domain: str = "category"
    no_category_nodes: bool = False
    no_category_transition: bool = False
    target_meanpool: bool = False
    attention_readout: bool = False
    add_original_item_transition: bool = False
    # execution
    workers: int = 1
    deterministic: bool = False

    def __post_init__(self):
        if self.sep not in ("comma", "tab"):
            raise ConfigError(f"sep must be 'comma' or 'tab', got {self.sep!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.model_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def separator(self) -> str:
        return "," if self.sep == "comma" else "\t"

    @property
    def effective_workers(self) -> int:
        return 1 if self.deterministic else self.workers

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        kw["pos_dim"] = self.pos_dim or None
        return ModelConfig(**kw)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)} - {"model"}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        return TrainConfig(model=self.model_config(), **kw)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def coerce(key: str, raw: str) -> Any:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key: {key}")
    kind = _TYPES[key]
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, raw = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        values[key.strip()] = coerce(key.strip(), raw)
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """File values first, then non-``None`` overrides."""
    values: dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _TYPES:
            raise ConfigError(f"unknown config key: {k}")
        values[k] = v
    return RunConfig(**values)


def with_updates(config: RunConfig, **kw) -> RunConfig:
    return replace(config, **kw)


# grid specifications ---------------------------------------------------------


@dataclass
class GridSpec:
    learning_rates: tuple[float, ...] = (0.001, 0.005, 0.01, 0.05, 0.1)
    decay_steps: tuple[int, ...] = (2, 3, 4)
    layers: tuple[int, ...] = (1, 2, 3, 4, 5)
    subsample: int = 0  # training examples per cell; 0 keeps all


_GRID_KEYS = {"learning_rate": ("learning_rates", float), "lr_decay_step_epochs": ("decay_steps", int), "layers": ("layers", int)}


def load_grid_spec(path: str | Path) -> GridSpec:
    """``key = v1, v2, ...`` lines for ``learning_rate``, ``lr_decay_step_epochs``, ``layers``; plus ``subsample = N``."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"grid spec not found: {p}")
    spec = GridSpec()
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, raw = line.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value'")
        if key == "subsample":
            spec.subsample = int(raw)
            continue
        if key not in _GRID_KEYS:
            raise ConfigError(f"unknown grid key: {key}")
        attr, kind = _GRID_KEYS[key]
        try:
            vals = tuple(kind(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{p}:{lineno}: cannot parse values for {key}") from None
        if not vals:
            raise ConfigError(f"{p}:{lineno}: empty value list for {key}")
        setattr(spec, attr, vals)
    return spec

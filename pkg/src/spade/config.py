"""Model / training configuration and flat dotted-key config files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from .data import DEFAULT_HORIZONS, Horizon
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    quantiles: tuple[float, ...] = (0.5, 0.9)
    horizons: tuple[Horizon, ...] = DEFAULT_HORIZONS
    n_past: int = 1
    n_static: int = 1
    n_future: int = 2
    context_length: int = 24
    conv_layers: int = 6
    conv_filters: int = 8
    kernel_size: int = 8
    static_width: int = 30
    future_width: int = 50
    agnostic_width: int = 32
    specific_width: int = 20
    attention_width: int = 16
    attention_heads: int = 4
    backbone: str = "mqcnn"
    history_window: int = 24

    def __post_init__(self):
        object.__setattr__(self, "quantiles", tuple(float(q) for q in self.quantiles))
        object.__setattr__(self, "horizons", tuple((int(l), int(s)) for l, s in self.horizons))
        q = self.quantiles
        if not q or any(not 0.0 < x < 1.0 for x in q) or any(a >= b for a, b in zip(q, q[1:])):
            raise ConfigError(f"quantiles must lie in (0, 1) and strictly increase, got {q}")
        for name in ("n_past", "n_static", "n_future", "context_length", "conv_layers", "conv_filters",
                     "kernel_size", "static_width", "future_width", "agnostic_width", "specific_width",
                     "attention_width", "attention_heads", "history_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.attention_width % self.attention_heads:
            raise ConfigError(f"attention_width {self.attention_width} is not divisible by "
                              f"{self.attention_heads} heads")
        if self.backbone not in ("mqcnn", "mqt_like"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")

    @property
    def effective_kernel(self) -> int:
        return max(1, min(self.kernel_size, self.context_length // 2))

    @property
    def dilations(self) -> list[int]:
        return [2 ** i for i in range(self.conv_layers)]

    def paper_scale(self) -> "ModelConfig":
        return replace(self, conv_filters=30, agnostic_width=100, kernel_size=32,
                       context_length=max(self.context_length, 64))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    holdout: int = 12

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.holdout < 0:
            raise ConfigError("holdout must be >= 0")


# ---------------------------------------------------------------------------
# flat dotted-key configs
# ---------------------------------------------------------------------------

DEFAULTS: dict[str, Any] = {
    "data.path": None,
    "data.freq": "M",
    "data.n_series": 555,
    "data.periods": 228,
    "data.rate": 0.03,
    "data.start": "1998-01-01",
    "eval.window": 4,
    "eval.checkpoint": None,
    "eval.forecasts": None,
    "ablate.variants": ["original", "masked_conv", "full"],
    "ablate.seeds": [0, 1, 2, 3, 4],
    "plot.series": [],
    "plot.forecasts": None,
    "seed": 0,
    "jobs": 1,
    "paper_scale": False,
}
for _f in fields(ModelConfig):
    DEFAULTS[f"model.{_f.name}"] = _f.default
for _f in fields(TrainConfig):
    if _f.name != "seed":
        DEFAULTS[f"train.{_f.name}"] = _f.default


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def load_config(path: str | Path | None) -> dict[str, Any]:
    """Defaults overlaid with a JSON file of flat dotted keys."""
    cfg = {k: _jsonable(v) for k, v in DEFAULTS.items()}
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object of dotted keys")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg.update(raw)
    return cfg


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value`` with the value parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def model_config(cfg: dict[str, Any], **dims) -> ModelConfig:
    kw = {f.name: cfg[f"model.{f.name}"] for f in fields(ModelConfig)}
    kw["horizons"] = tuple(tuple(h) for h in kw["horizons"])
    kw.update(dims)
    mc = ModelConfig(**kw)
    return mc.paper_scale() if cfg.get("paper_scale") else mc


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    kw = {f.name: cfg[f"train.{f.name}"] for f in fields(TrainConfig) if f.name != "seed"}
    return TrainConfig(seed=int(cfg["seed"]), **kw)


def model_config_to_dict(mc: ModelConfig) -> dict[str, Any]:
    return {k: _jsonable(v) for k, v in asdict(mc).items()}


def model_config_from_dict(d: dict[str, Any]) -> ModelConfig:
    d = dict(d)
    d["horizons"] = tuple(tuple(h) for h in d["horizons"])
    d["quantiles"] = tuple(d["quantiles"])
    return ModelConfig(**d)

"""
Configuration management for wsol.

Typed, validated configuration for the network, the loss, training, the
synthetic dataset and evaluation, process settings read from the environment,
and the line-oriented ``key = value`` config file used by the CLI.
"""

import math
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from .exceptions import ConfigFileError, InvalidConfigurationError

M = TypeVar("M", bound=BaseModel)


class LogLevel(str, Enum):
    """Logging levels."""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"


class LossTerm(str, Enum):
    """The seven terms of the total loss, in weighting order."""
    CLS = "cls"
    CLS_FG = "cls-fg"
    AE = "ae"
    AE_FG = "ae-fg"
    PSEUDO = "pseudo"
    BAS = "bas"
    AC = "ac"

    @property
    def key(self) -> str:
        return self.value.replace("-", "_")


AUXILIARY_TERMS: Tuple[LossTerm, ...] = (
    LossTerm.CLS_FG,
    LossTerm.AE,
    LossTerm.AE_FG,
    LossTerm.PSEUDO,
    LossTerm.BAS,
    LossTerm.AC,
)


class Settings(BaseSettings):
    """Process-level settings read from WSOL_* environment variables."""

    threads: int = Field(1, ge=1, le=64)
    debug: bool = False
    log_level: LogLevel = LogLevel.INFO
    log_json: bool = False

    class Config:
        env_prefix = "WSOL_"
        case_sensitive = False


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance with validation."""
    try:
        return Settings()
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first["loc"]) or "settings"
        raise InvalidConfigurationError(f"WSOL_{key.upper()}", first.get("input"), first["msg"])


class ModelConfig(BaseModel):
    """Network geometry. F^f is input/feature_stride, F^c is input/score_stride."""

    input_size: int = Field(64, ge=8)
    num_classes: int = Field(8, ge=2)
    feature_channels: int = Field(32, ge=1)
    feature_stride: int = Field(8, ge=2)
    backbone_blocks: int = Field(3, ge=1)
    seed: int = Field(0, ge=0)

    @field_validator("feature_stride")
    @classmethod
    def validate_feature_stride(cls, v):
        if v & (v - 1):
            raise ValueError("feature_stride must be a power of two")
        return v

    @model_validator(mode="after")
    def validate_geometry(self):
        if self.backbone_blocks < self.downsampling_stages:
            raise ValueError(
                f"backbone_blocks={self.backbone_blocks} cannot realise feature_stride={self.feature_stride}"
            )
        if self.input_size % self.score_stride:
            raise ValueError(
                f"input_size={self.input_size} not divisible by score_stride={self.score_stride}"
            )
        return self

    @property
    def score_stride(self) -> int:
        return 2 * self.feature_stride

    @property
    def downsampling_stages(self) -> int:
        return int(math.log2(self.feature_stride))

    @property
    def feature_size(self) -> int:
        return self.input_size // self.feature_stride


class MaskThresholds(BaseModel):
    """Thresholds of the binary erase, soft erase and pseudo-label masks."""

    t1: float = Field(0.8, ge=0.0, le=1.0)
    t2: float = Field(0.8, ge=0.0, le=1.0)
    t3: float = Field(0.4, ge=0.0, le=1.0)
    t4: float = Field(0.1, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def validate_pseudo_band(self):
        if self.t4 >= self.t3:
            raise ValueError(f"t4={self.t4} must be below t3={self.t3}")
        return self


def _all_enabled() -> Dict[LossTerm, bool]:
    return {term: True for term in LossTerm}


ABLATION_PRESETS: Dict[str, Tuple[LossTerm, ...]] = {
    "baseline": (LossTerm.AE, LossTerm.AE_FG, LossTerm.PSEUDO),
    "+pseudo": (LossTerm.AE, LossTerm.AE_FG),
    "+pseudo+ae-fg": (LossTerm.AE,),
    "full": (),
}


class LossConfig(BaseModel):
    """Weights, thresholds and gradient-routing switches of the total loss."""

    thresholds: MaskThresholds = Field(default_factory=MaskThresholds)
    gamma: Tuple[float, float, float, float, float, float] = (0.5, 0.5, 0.1, 0.1, 1.0, 1.5)
    epsilon: float = Field(1e-8, gt=0.0)
    bas_detach_classifier: bool = True
    enabled: Dict[LossTerm, bool] = Field(default_factory=_all_enabled)

    @field_validator("gamma")
    @classmethod
    def validate_gamma(cls, v):
        if any(g < 0 for g in v):
            raise ValueError("gamma values must be >= 0")
        return v

    @field_validator("enabled")
    @classmethod
    def fill_enabled(cls, v):
        return {term: bool(v.get(term, True)) for term in LossTerm}

    def is_enabled(self, term: LossTerm) -> bool:
        return self.enabled[term]

    def weight(self, term: LossTerm) -> float:
        """Weight of a term in the total; L_cls carries an implicit 1."""
        if term is LossTerm.CLS:
            return 1.0
        return self.gamma[AUXILIARY_TERMS.index(term)]

    def without(self, *terms: LossTerm) -> "LossConfig":
        enabled = dict(self.enabled)
        for term in terms:
            enabled[term] = False
        return self.model_copy(update={"enabled": enabled})

    @classmethod
    def preset(cls, name: str) -> "LossConfig":
        """Loss-term ablation rows: baseline, +pseudo, +pseudo+ae-fg, full."""
        if name not in ABLATION_PRESETS:
            raise InvalidConfigurationError("preset", name, f"one of {sorted(ABLATION_PRESETS)}")
        return cls().without(*ABLATION_PRESETS[name])

    def summary(self) -> Dict[str, Any]:
        return {
            "thresholds": self.thresholds.model_dump(),
            "gamma": list(self.gamma),
            "epsilon": self.epsilon,
            "bas_detach_classifier": self.bas_detach_classifier,
            "enabled": sorted(t.value for t, on in self.enabled.items() if on),
        }


class TrainConfig(BaseModel):
    """SGD-with-momentum training loop settings."""

    learning_rate: float = Field(0.001, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(16, ge=1)
    seed: int = Field(0, ge=0)
    shuffle: bool = True
    lr_decay_epochs: Optional[int] = Field(None, ge=1)
    lr_decay_factor: float = Field(0.1, gt=0.0, le=1.0)

    def learning_rate_at(self, epoch: int) -> float:
        """Learning rate for a zero-based epoch index (constant unless step decay is set)."""
        if self.lr_decay_epochs is None:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_epochs)


class DatasetSpec(BaseModel):
    """Synthetic-shapes dataset parameters."""

    num_classes: int = Field(8, ge=2)
    samples_per_class: int = Field(64, ge=1)
    image_size: int = Field(64, ge=16)
    noise_level: float = Field(0.1, ge=0.0, le=1.0)
    seed: int = Field(0, ge=0)


SWEEP_THRESHOLDS: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class EvalConfig(BaseModel):
    """Box extraction and IoU settings."""

    theta: float = Field(0.45, ge=0.0, le=1.0)
    iou_threshold: float = Field(0.5, ge=0.0, le=1.0)
    sweep: bool = False
    batch_size: int = Field(32, ge=1)


def validated(model_cls: Type[M], values: Dict[str, Any], key_prefix: str = "") -> M:
    """Build a config model, converting pydantic errors to InvalidConfigurationError."""
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first["loc"]) or model_cls.__name__
        raise InvalidConfigurationError(f"{key_prefix}{key}", first.get("input"), first["msg"]) from e


def with_overrides(config: M, **updates: Any) -> M:
    """Return a re-validated copy of a config with non-None updates applied."""
    values = config.model_dump()
    values.update({k: v for k, v in updates.items() if v is not None})
    return validated(type(config), values)


# Config file
_THRESHOLD_KEYS = {"t1", "t2", "t3", "t4"}
_GAMMA_KEYS = {f"gamma{i}": i - 1 for i in range(1, 7)}
_ENABLE_KEYS = {f"enable_{term.key}": term for term in LossTerm}


def parse_config_file(path: Path) -> List[Tuple[int, str, str]]:
    """Parse ``key = value`` lines, skipping blanks and ``#`` comments."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigFileError(str(path), 0, f"unreadable: {e}")
    entries = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigFileError(str(path), number, f"expected 'key = value', got {raw.strip()!r}")
        entries.append((number, key, value))
    return entries


def apply_config_file(
    path: Path,
    model: ModelConfig,
    loss: LossConfig,
    train: TrainConfig,
) -> Tuple[ModelConfig, LossConfig, TrainConfig]:
    """Apply a config file on top of the given configs; errors name the line."""
    model_values = model.model_dump()
    train_values = train.model_dump()
    loss_values = loss.model_dump()
    lines: Dict[str, Dict[str, int]] = {"model": {}, "train": {}, "loss": {}}

    for number, key, value in parse_config_file(path):
        if key == "seed":
            # one seed drives both initialisation and shuffling
            model_values[key] = train_values[key] = value
            lines["model"][key] = lines["train"][key] = number
        elif key in ModelConfig.model_fields:
            model_values[key] = value
            lines["model"][key] = number
        elif key in TrainConfig.model_fields:
            train_values[key] = None if value.lower() == "none" else value
            lines["train"][key] = number
        elif key in _THRESHOLD_KEYS:
            loss_values["thresholds"][key] = value
            lines["loss"][key] = number
        elif key in _GAMMA_KEYS:
            gamma = list(loss_values["gamma"])
            gamma[_GAMMA_KEYS[key]] = value
            loss_values["gamma"] = gamma
            lines["loss"]["gamma"] = number
        elif key in _ENABLE_KEYS:
            loss_values["enabled"][_ENABLE_KEYS[key]] = value
            lines["loss"]["enabled"] = number
        elif key in ("epsilon", "bas_detach_classifier"):
            loss_values[key] = value
            lines["loss"][key] = number
        else:
            raise ConfigFileError(str(path), number, f"unknown key '{key}'")

    def build(model_cls: Type[M], values: Dict[str, Any], section: str) -> M:
        try:
            return model_cls.model_validate(values)
        except ValidationError as e:
            first = e.errors()[0]
            loc = [str(p) for p in first["loc"]]
            seen = lines[section]
            number = next((seen[p] for p in reversed(loc) if p in seen), max(seen.values(), default=0))
            raise ConfigFileError(str(path), number, first["msg"]) from e

    return (
        build(ModelConfig, model_values, "model"),
        build(LossConfig, loss_values, "loss"),
        build(TrainConfig, train_values, "train"),
    )

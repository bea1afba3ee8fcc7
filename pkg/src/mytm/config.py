"""Flat run configuration: model defaults, YAML file, environment and flag overrides."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

ABLATION_SWITCHES = {
    "adapter": "use_adapter",
    "extra": "use_extrapolation_reg",
    "persage": "use_personalized_aging_loss",
    "wnorm": "use_adaptive_wnorm",
}


class LossWeights(BaseModel):
    """Weights of every loss term; the pixel, perceptual, identity and age weights follow SAM's aging defaults."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda_l2: float = Field(0.25, ge=0)
    lambda_lpips: float = Field(0.1, ge=0)
    lambda_id: float = Field(0.1, ge=0)
    # SAM weights the age gap at 5 on ages / 100.
    lambda_age: float = Field(0.05, ge=0)
    lambda_pers_age: float = Field(1.0, ge=0)
    lambda_reg_extra: float = Field(1.0, ge=0)
    lambda_reg: float = Field(1.0, ge=0)

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(**{name: 0.0 for name in cls.model_fields})


class AblationFlags(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    use_adapter: bool = True
    use_extrapolation_reg: bool = True
    use_personalized_aging_loss: bool = True
    use_adaptive_wnorm: bool = True

    @classmethod
    def all_off(cls) -> "AblationFlags":
        return cls(
            use_adapter=False,
            use_extrapolation_reg=False,
            use_personalized_aging_loss=False,
            use_adaptive_wnorm=False,
        )


class AdapterConfig(BaseModel):
    """Hidden widths of the adapter MLPs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    global_hidden: int = Field(256, gt=0)
    global_dim: int = Field(32, gt=0)
    global_out: int = Field(512, gt=0)
    aging_hidden: int = Field(64, gt=0)
    age_features: int = Field(16, gt=0)
    style_hidden: int = Field(512, gt=0)

    def reduced(self, factor: int = 16) -> "AdapterConfig":
        return AdapterConfig(**{name: max(1, value // factor) for name, value in self.model_dump().items()})


class TrainingConfig(BaseModel):
    """Every key the trainer reads. Flat: no nested sections."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = 0
    iterations: int = Field(10000, gt=0)
    optimizer: Literal["adam", "adamw", "sgd"] = "adam"
    learning_rate: float = Field(1e-4, gt=0)
    batch_size: int = Field(1, gt=0)
    checkpoint_every: int = Field(1000, gt=0)
    log_every: int = Field(100, gt=0)
    p_extrapolate: float = Field(0.5, ge=0, le=1)
    reference_window: int = Field(3, ge=0)
    reference_max_window: int = Field(10, ge=0)

    lambda_l2: float = Field(0.25, ge=0)
    lambda_lpips: float = Field(0.1, ge=0)
    lambda_id: float = Field(0.1, ge=0)
    lambda_age: float = Field(0.05, ge=0)
    lambda_pers_age: float = Field(1.0, ge=0)
    lambda_reg_extra: float = Field(1.0, ge=0)
    lambda_reg: float = Field(1.0, ge=0)

    use_adapter: bool = True
    use_extrapolation_reg: bool = True
    use_personalized_aging_loss: bool = True
    use_adaptive_wnorm: bool = True

    adapter_global_hidden: int = Field(256, gt=0)
    adapter_global_dim: int = Field(32, gt=0)
    adapter_global_out: int = Field(512, gt=0)
    adapter_aging_hidden: int = Field(64, gt=0)
    adapter_age_features: int = Field(16, gt=0)
    adapter_style_hidden: int = Field(512, gt=0)

    @model_validator(mode="after")
    def _check_window(self) -> "TrainingConfig":
        if self.reference_max_window < self.reference_window:
            raise ValueError("reference_max_window must be >= reference_window")
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(**{name: getattr(self, name) for name in LossWeights.model_fields})

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(**{name: getattr(self, name) for name in AblationFlags.model_fields})

    @property
    def adapter(self) -> AdapterConfig:
        return AdapterConfig(**{name: getattr(self, f"adapter_{name}") for name in AdapterConfig.model_fields})

    def with_adapter(self, adapter: AdapterConfig) -> "TrainingConfig":
        return self.model_copy(update={f"adapter_{k}": v for k, v in adapter.model_dump().items()})

    def with_flags(self, flags: AblationFlags) -> "TrainingConfig":
        return self.model_copy(update=flags.model_dump())


class RunConfig(TrainingConfig):
    """Training keys plus backend selection and pipeline options."""

    backend: Literal["toy", "real"] = "toy"
    dtype: Literal["float32", "float64"] = "float32"
    workers: int = Field(1, gt=0)
    paste_alpha: float = Field(1.0, ge=0, le=1)

    real_encoder: Optional[str] = None
    real_decoder: Optional[str] = None
    real_identity: Optional[str] = None
    real_age_train: Optional[str] = None
    real_age_eval: Optional[str] = None
    real_perceptual: Optional[str] = None
    real_swapper: Optional[str] = None
    real_aligner: Optional[str] = None
    real_mean_latent: Optional[str] = None
    real_resolution: int = Field(1024, gt=0)


def config_hash(config: BaseModel) -> str:
    """md5 of the sorted-key JSON dump; independent of key order in the source file."""
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.md5(payload.encode()).hexdigest()


def parse_ablate(value: Optional[str]) -> Dict[str, bool]:
    """Turn ``adapter,extra`` into ``{"use_adapter": False, "use_extrapolation_reg": False}``."""
    if not value:
        return {}
    overrides: Dict[str, bool] = {}
    for name in (part.strip() for part in value.split(",")):
        if not name:
            continue
        if name not in ABLATION_SWITCHES:
            raise ConfigError(
                f"unknown ablation switch {name!r}; expected one of {', '.join(sorted(ABLATION_SWITCHES))}"
            )
        overrides[ABLATION_SWITCHES[name]] = False
    return overrides


def _load_env_defaults() -> Dict[str, Any]:
    defaults: Dict[str, Any] = {}
    backend = os.environ.get("MYTM_BACKEND")
    if backend:
        defaults["backend"] = backend
    return defaults


def _read_config_file(path: Path) -> Dict[str, Any]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must be a key-value mapping")
    nested = sorted(key for key, value in data.items() if isinstance(value, (dict, list)))
    if nested:
        raise ConfigError(f"config file {path} must be flat; nested keys: {', '.join(map(str, nested))}")
    return data


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge model defaults < environment < config file < flag overrides."""
    merged: Dict[str, Any] = _load_env_defaults()
    if path is not None:
        merged.update(_read_config_file(path))
    merged.update({key: value for key, value in (overrides or {}).items() if value is not None})
    try:
        config = RunConfig(**merged)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    logger.debug("Loaded config hash=%s keys=%s", config_hash(config), sorted(merged))
    return config

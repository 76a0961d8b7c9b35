"""
DiffuEraser Desk - Core Configuration
"""
import os
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Type, TypeVar

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from app.exceptions import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT", bound=BaseModel)


def _env_int(name: str) -> Optional[int]:
    value = os.getenv(name, "").strip()
    if not value:
        return None
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f"{name} must be an integer, got {value!r}") from e


@dataclass
class RuntimeConfig:
    """Process-level settings read from the environment (.env honoured)"""
    seed_override: Optional[int] = field(default_factory=lambda: _env_int("DIFFUERASER_SEED"))
    device: str = field(default_factory=lambda: os.getenv("DIFFUERASER_DEVICE", "cpu").strip())
    log_level: str = field(default_factory=lambda: os.getenv("DIFFUERASER_LOG_LEVEL", "INFO").strip().upper())
    cache_size: int = field(default_factory=lambda: _env_int("DIFFUERASER_CACHE_SIZE") or CACHE_CONFIG["max_entries"])
    num_workers: int = field(default_factory=lambda: _env_int("DIFFUERASER_NUM_WORKERS") or 4)


@dataclass
class AppConfig:
    """Application metadata"""
    title: str = "DiffuEraser Desk"
    subtitle: str = "Desk-scale diffusion video inpainting with prior injection and staggered clip scheduling"
    version: str = "0.1.0"


# Frame directory convention
FRAME_PATTERN = "frame_{:05d}.png"
META_FILENAME = "meta.json"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# Process exit codes
EXIT_CODES = {
    "success": 0,
    "runtime": 1,
    "usage": 2,
}

# Inversion cache
CACHE_CONFIG = {
    "max_entries": 8,
}

# Toy architecture defaults
DEFAULT_ARCHITECTURE = {
    "latent_channels": 4,
    "base_width": 32,
    "channel_mult": (1, 2, 2),
    "num_heads": 4,
    "null_tokens": 4,
    "context_dim": 32,
    "norm_groups": 8,
}

PSNR_CAP_DB = 99.0


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ScheduleConfig(_StrictModel):
    """Diffusion schedule; serialized verbatim into the checkpoint header"""
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    steps: int = 50

    @model_validator(mode="after")
    def _check(self) -> "ScheduleConfig":
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ValueError("betas must satisfy 0 < beta_start < beta_end < 1")
        if not 1 <= self.steps <= self.T:
            raise ValueError(f"steps must lie in [1, {self.T}]")
        return self


class CodecConfig(_StrictModel):
    mode: Literal["default", "lossless"] = "default"
    hidden_channels: int = 48
    seed: int = 0


class ModelConfig(_StrictModel):
    latent_channels: int = DEFAULT_ARCHITECTURE["latent_channels"]
    base_width: int = DEFAULT_ARCHITECTURE["base_width"]
    channel_mult: Tuple[int, ...] = DEFAULT_ARCHITECTURE["channel_mult"]
    num_heads: int = DEFAULT_ARCHITECTURE["num_heads"]
    null_tokens: int = DEFAULT_ARCHITECTURE["null_tokens"]
    context_dim: int = DEFAULT_ARCHITECTURE["context_dim"]
    norm_groups: int = DEFAULT_ARCHITECTURE["norm_groups"]
    temporal_position_encoding: bool = True
    max_frames: int = 256
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        for mult in self.channel_mult:
            width = self.base_width * mult
            if width % self.num_heads or width % self.norm_groups or width % 2:
                raise ValueError(
                    f"level width {width} must be even and divisible by num_heads and norm_groups"
                )
        return self

    @property
    def level_widths(self) -> Tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mult)


class InferenceConfig(_StrictModel):
    """Inference settings; flag names on the CLI mirror these fields"""
    clip_len: int = 22
    steps: int = 50
    seed: int = 0
    prior_strength: float = 1.0
    blur_sigma: float = 2.0
    guidance_enabled: bool = True
    bypass_diffusion: bool = False
    prior_command: Optional[str] = None
    inversion_refine_iters: int = 0
    mask_dilation: int = 4
    pin_known_latents: bool = True

    @field_validator("clip_len")
    @classmethod
    def _clip_len(cls, v: int) -> int:
        if v < 1:
            raise ValueError("clip_len must be >= 1")
        return v

    @field_validator("prior_strength")
    @classmethod
    def _strength(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("prior_strength must lie in [0, 1]")
        return v

    @field_validator("blur_sigma", "inversion_refine_iters", "mask_dilation")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    @model_validator(mode="after")
    def _steps(self) -> "InferenceConfig":
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps == 0 and not self.bypass_diffusion:
            raise ValueError("steps=0 is only allowed together with bypass_diffusion")
        return self


class TrainConfig(_StrictModel):
    stage: Literal[1, 2] = 1
    lr: float = 1e-5
    batch_size: int = 1
    n_steps: int = 1000
    clip_frames: int = 22
    seed: int = 0
    log_every: int = 10

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.n_steps < 0 or self.clip_frames < 1:
            raise ValueError("batch_size and clip_frames must be >= 1, n_steps >= 0")
        return self


class MaskGenConfig(_StrictModel):
    rate: float = 0.3
    direction: float = 0.0
    shape: Literal["rectangle", "ellipse", "stroke"] = "rectangle"
    seed: int = 0
    speed: float = 1.0
    jitter: float = 1.0

    @field_validator("rate")
    @classmethod
    def _rate(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("rate must lie in [0, 1]")
        return v


def load_config_file(path: Optional[os.PathLike]) -> Dict[str, Any]:
    """Read a JSON or YAML config file into a plain dict"""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text()
        if path.suffix.lower() in (".yaml", ".yml"):
            values = yaml.safe_load(text) or {}
        else:
            values = json.loads(text)
    except (OSError, json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"could not parse config file {path}: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return values


def build_config(model_cls: Type[ConfigT], *sources: Optional[Dict[str, Any]]) -> ConfigT:
    """Merge dicts left to right (later wins, None values skipped) and validate"""
    merged: Dict[str, Any] = {}
    for source in sources:
        if source:
            merged.update({k: v for k, v in source.items() if v is not None})
    try:
        return model_cls(**merged)
    except ValidationError as e:
        raise ConfigError(f"invalid {model_cls.__name__}: {e}") from e


def apply_seed_override(config: ConfigT, runtime: Optional[RuntimeConfig] = None) -> ConfigT:
    """DIFFUERASER_SEED wins over any configured seed"""
    runtime = runtime or RuntimeConfig()
    if runtime.seed_override is not None and hasattr(config, "seed"):
        logger.info(f"Seed overridden from environment: {runtime.seed_override}")
        return config.model_copy(update={"seed": runtime.seed_override})
    return config


def initialize_logging(level: Optional[str] = None):
    """Configure root logging once for CLI entry points"""
    runtime = RuntimeConfig()
    logging.basicConfig(
        level=getattr(logging, (level or runtime.log_level), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

"""
FEWSHOT-AD RUN CONFIGURATION
============================
Every pipeline knob in one place. A JSON file overlays the built-in
defaults, and command-line flags overlay the file:

    flag > config file > default

Unknown keys in a file are rejected so typos do not silently fall back to
defaults.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .customization import BaseTrainingConfig, CustomizationConfig
from .errors import ConfigError

CACHE_ENV = "FEWSHOT_AD_CACHE"
DEFAULT_CACHE = Path.home() / ".cache" / "fewshot_ad"
CODE_VERSION = "1.0.0"

PathLike = Union[str, Path]


@dataclass
class RunConfig:
    # Scoring
    t_ratio: float = 0.3
    alpha: float = 1.0
    beta: float = 0.5
    temperature: float = 1.0
    bank_capacity: int = 30

    # Protocol
    shots: int = 8
    shot_sweep: List[int] = field(default_factory=lambda: [2, 4, 8])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    category: Optional[str] = None
    image_size: List[int] = field(default_factory=lambda: [32, 32])

    # Encoder
    cell_sizes: List[int] = field(default_factory=lambda: [4, 8, 16])
    feature_dim: int = 64
    encoder_seed: int = 0

    # Schedule
    num_steps: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1

    # Generation and personalization
    t_ratio_bank: float = 0.15
    prompt_count: int = 3
    generated_count: int = 100

    # Customization
    per_image: int = 4
    prior_ratio: float = 2.0
    epochs: int = 40
    learning_rate: float = 0.02
    batch_size: int = 16

    # Base model
    base_channels: int = 16
    base_epochs: int = 30
    base_corpus_per_family: int = 24
    base_seed: int = 0

    # Execution
    workers: int = 1
    timing: bool = False
    cache_dir: Optional[str] = None
    output_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.t_ratio < 1.0:
            raise ConfigError(f"t_ratio must lie in (0, 1), got {self.t_ratio}")
        if not 0.0 < self.t_ratio_bank < 1.0:
            raise ConfigError(f"t_ratio_bank must lie in (0, 1), got {self.t_ratio_bank}")
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.bank_capacity < self.shots:
            raise ConfigError(f"bank_capacity ({self.bank_capacity}) must be >= shots ({self.shots})")
        if any(k < 1 for k in self.shot_sweep):
            raise ConfigError(f"shot_sweep entries must be >= 1, got {self.shot_sweep}")
        if self.shot_sweep and self.bank_capacity < max(self.shot_sweep):
            raise ConfigError(f"bank_capacity ({self.bank_capacity}) must be >= every shot_sweep entry "
                              f"(largest {max(self.shot_sweep)})")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise ConfigError(f"image_size must be [H, W] with both >= 8, got {self.image_size}")
        if self.num_steps < 2:
            raise ConfigError(f"num_steps must be >= 2, got {self.num_steps}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        for name in ("epochs", "base_epochs", "batch_size", "prompt_count", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("per_image", "generated_count"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")

    # -------------------------------------------------------------------------
    # Derived settings
    # -------------------------------------------------------------------------

    def customization(self) -> CustomizationConfig:
        return CustomizationConfig(per_image=self.per_image, prior_ratio=self.prior_ratio,
                                   epochs=self.epochs, learning_rate=self.learning_rate,
                                   batch_size=self.batch_size)

    def base_training(self) -> BaseTrainingConfig:
        return BaseTrainingConfig(per_family=self.base_corpus_per_family, epochs=self.base_epochs,
                                  learning_rate=self.learning_rate, batch_size=self.batch_size,
                                  base_channels=self.base_channels)

    def cache_root(self) -> Path:
        if self.cache_dir:
            return Path(self.cache_dir)
        return Path(os.environ.get(CACHE_ENV, DEFAULT_CACHE))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self, exclude=("workers", "timing", "cache_dir", "output_dir")) -> str:
        """Hash of every setting that changes results."""
        payload = {k: v for k, v in self.to_dict().items() if k not in exclude}
        payload["code_version"] = CODE_VERSION
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def load_config(path: Optional[PathLike]) -> Dict[str, Any]:
    """Raw settings from a JSON config file; empty when no path is given."""
    if path is None:
        return {}
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError("config file not found", path=str(path)) from e
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"could not read config: {e}", path=str(path)) from e
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object", path=str(path))
    unknown = sorted(set(data) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}", path=str(path))
    return data


def resolve_config(path: Optional[PathLike] = None,
                   overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults, then the file, then non-None overrides."""
    settings = load_config(path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in FIELD_NAMES:
            raise ConfigError(f"unknown setting {key!r}")
        settings[key] = value
    try:
        return RunConfig(**settings)
    except TypeError as e:
        raise ConfigError(f"bad config value: {e}") from e

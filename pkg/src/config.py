"""
Training configuration: dataclasses, named presets, the key = value config
file (read with python-dotenv) and environment settings.
"""

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional

from dotenv import dotenv_values

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration key or value."""


@dataclass
class LossWeights:
    lambda_rec: float = 5.0
    lambda_perc: float = 1.0
    lambda_flip: float = 0.8
    lambda_perturb: float = 2.0
    beta: float = 0.5
    lambda_lvcyc: float = 2.0
    lambda_idt: float = 1.0
    lambda_regA: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"Loss weight {f.name} must be non-negative, got {getattr(self, f.name)}")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    image_size: int = 32
    latent_dim: int = 64
    width: float = 0.125
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    yaw_range: float = 45.0
    pitch_range: float = 10.0
    identity_gate: float = 25.0
    checkpoint_interval: int = 500
    log_interval: int = 10
    fov: float = 10.0
    raster_sigma: Optional[float] = None
    raster_gamma: float = 1e-2
    embed_dim: int = 64
    prior_samples: int = 10000
    prior_reduction: str = "sum"
    prior_per_dim: bool = False
    perturb_perceptual: bool = True
    manipulator_residual: bool = True
    inject_conv: bool = False
    use_flip: bool = True
    use_perturb: bool = True
    use_regA: bool = True
    use_identity: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        size = self.image_size
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if size < 8 or size > 256 or size & (size - 1):
            raise ConfigError(f"image_size must be a power of two in [8, 256], got {size}")
        if not 0 <= self.yaw_range <= 60 or not 0 <= self.pitch_range <= 60:
            raise ConfigError("perturbation ranges must lie within the +-60 degree viewpoint range")
        if not 0.0 < self.fov < 90.0:
            raise ConfigError(f"fov must be in (0, 90), got {self.fov}")
        if self.prior_reduction not in ("mean", "sum"):
            raise ConfigError(f"prior_reduction must be 'mean' or 'sum', got {self.prior_reduction!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.width <= 0 or self.latent_dim < 1 or self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ConfigError("width, latent_dim, checkpoint_interval and log_interval must be positive")
        return self

    def effective_weights(self) -> LossWeights:
        """Loss weights with ablated terms set to zero."""
        w = self.weights
        return replace(
            w,
            lambda_flip=w.lambda_flip if self.use_flip else 0.0,
            lambda_perturb=w.lambda_perturb if self.use_perturb else 0.0,
            lambda_regA=w.lambda_regA if self.use_regA else 0.0,
            lambda_idt=w.lambda_idt if self.use_identity else 0.0,
        )

    def to_flat(self) -> Dict[str, Any]:
        flat = {k: v for k, v in asdict(self).items() if k != "weights"}
        flat.update(asdict(self.weights))
        return flat

    def config_hash(self) -> str:
        lines = [f"{k}={v}" for k, v in sorted(self.to_flat().items())]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "full": {"steps": 30000, "image_size": 256, "latent_dim": 512, "width": 1.0, "embed_dim": 512},
}

_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig) if f.name != "weights"}
_WEIGHT_FIELDS = {f.name: f for f in fields(LossWeights)}


def config_keys():
    return sorted(list(_TRAIN_FIELDS) + list(_WEIGHT_FIELDS))


def _coerce(name: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if default is None or name == "raster_sigma":
            return None if text.lower() in ("", "none") else float(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"Config key {name}: cannot parse {raw!r}")


def build_config(values: Optional[Dict[str, Any]] = None, preset: str = "desk") -> TrainConfig:
    """Preset, then `values` (file keys or flag overrides); unknown keys raise ConfigError."""
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged: Dict[str, Any] = dict(PRESETS[preset])
    merged.update(values or {})
    base, weights = TrainConfig(), LossWeights()
    train_kwargs: Dict[str, Any] = {}
    weight_kwargs: Dict[str, Any] = {}
    for key, raw in merged.items():
        if raw is None and key != "raster_sigma":
            continue
        if key in _TRAIN_FIELDS:
            train_kwargs[key] = _coerce(key, raw, getattr(base, key))
        elif key in _WEIGHT_FIELDS:
            weight_kwargs[key] = _coerce(key, raw, getattr(weights, key))
        else:
            raise ConfigError(f"Unknown config key {key!r}")
    return TrainConfig(weights=LossWeights(**weight_kwargs), **train_kwargs).validate()


def load_config(path: Optional[str] = None, preset: str = "desk",
                overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """Read a UTF-8 key = value file (# comments) and apply flag overrides on top."""
    values: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        values.update(dotenv_values(path, encoding="utf-8"))
        preset = values.pop("preset", None) or preset
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    config = build_config(values, preset)
    logger.info(f"[CONFIG] preset={preset} size={config.image_size} d_w={config.latent_dim} "
                f"batch={config.batch_size} steps={config.steps} hash={config.config_hash()[:12]}")
    return config


def thread_count() -> int:
    """Worker cap from LIFTED3D_THREADS (defaults to the CPU count)."""
    raw = os.getenv("LIFTED3D_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning(f"[CONFIG] Ignoring non-integer LIFTED3D_THREADS={raw!r}")
    return os.cpu_count() or 1

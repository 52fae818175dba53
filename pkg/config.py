"""
Configuration module for the glucose forecasting system.
Contains all configuration classes and the flat run-config loader.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union, get_type_hints

from logger_config import get_logger

logger = get_logger(__name__)

CONFIG_VERSION = 1

# hour_frac, dow_frac, weekend
TIME_FEATURE_DIM = 3


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration values."""


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class ModelConfig:
    """Architecture of the personalized attention forecaster"""

    # ==================== Sequence Settings ====================
    t0: int = 190  # encoder length (190 points, about 16 hours)
    tau: int = 12  # forecast steps (one hour at 5-minute cadence)

    # ==================== Layer Sizes ====================
    enc_hidden: int = 120  # BiGRU hidden size per direction, N = 2 * enc_hidden
    dec_hidden: int = 30  # decoder GRU hidden size D
    embed_dim: int = 5  # patient embedding size d
    attn_heads: int = 4  # K
    attn_hidden: int = 64  # rows of each W^(k)
    head_hidden: int = 60  # tanh units in the output network
    init_std: float = 0.1  # N(0, 0.1^2) initialisation

    # ==================== Ablation Flags ====================
    use_attention: bool = True
    use_embedding: bool = True
    use_time_features: bool = True

    # ==================== Normalization ====================
    # Filled in from the training split before fitting; stored in the model file.
    norm_mean: float = 0.0
    norm_std: float = 1.0

    def __post_init__(self):
        _require(self.t0 >= 1, f"t0 must be >= 1, got {self.t0}")
        _require(self.tau >= 1, f"tau must be >= 1, got {self.tau}")
        for name in ("enc_hidden", "dec_hidden", "embed_dim", "attn_heads", "attn_hidden", "head_hidden"):
            value = getattr(self, name)
            _require(value >= 1, f"{name} must be >= 1, got {value}")
        _require(self.init_std > 0, f"init_std must be positive, got {self.init_std}")
        _require(self.norm_std > 0, f"norm_std must be positive, got {self.norm_std}")

    @property
    def time_dim(self) -> int:
        return TIME_FEATURE_DIM if self.use_time_features else 0

    @property
    def embed_width(self) -> int:
        return self.embed_dim if self.use_embedding else 0

    @property
    def encoder_state_dim(self) -> int:
        """N, the width of one concatenated bidirectional state."""
        return 2 * self.enc_hidden

    @property
    def encoder_input_dim(self) -> int:
        # [x_t || g(v) || time_t]
        return 1 + self.embed_width + self.time_dim

    @property
    def decoder_input_dim(self) -> int:
        # [a_i || g(v) || x_prev || time_{T+i}]
        context = self.encoder_state_dim if self.use_attention else 0
        return context + self.embed_width + 1 + self.time_dim

    @property
    def head_input_dim(self) -> int:
        # attention: [a_i || s_i || g(v) || x_prev || time], otherwise [s_i || g(v) || time]
        if self.use_attention:
            return self.encoder_state_dim + self.dec_hidden + self.embed_width + 1 + self.time_dim
        return self.dec_hidden + self.embed_width + self.time_dim


@dataclass
class TrainConfig:
    """Robust training loop settings"""

    beta: float = 0.9  # keep the lowest 90% of per-sample losses
    clip_init: float = 2.0  # element-wise clip threshold at epoch 0
    clip_decay: float = 0.99  # multiplicative decay per epoch

    # RAdam with default parameters
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rectify: bool = True

    batch_size: int = 128
    max_epochs: int = 100
    early_stop_patience: int = 10

    # Off by default; p_e = teacher_forcing_prob * teacher_forcing_decay ** epoch
    teacher_forcing_prob: float = 0.0
    teacher_forcing_decay: float = 1.0

    def __post_init__(self):
        _require(0.0 < self.beta <= 1.0, f"beta must be in (0, 1], got {self.beta}")
        _require(self.clip_init > 0, f"clip_init must be positive, got {self.clip_init}")
        _require(0.0 < self.clip_decay <= 1.0, f"clip_decay must be in (0, 1], got {self.clip_decay}")
        _require(self.learning_rate > 0, f"learning_rate must be positive, got {self.learning_rate}")
        _require(0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0,
                 "adam_beta1/adam_beta2 must be in [0, 1)")
        _require(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        _require(self.max_epochs >= 1, f"max_epochs must be >= 1, got {self.max_epochs}")
        _require(self.early_stop_patience >= 1, "early_stop_patience must be >= 1")
        _require(0.0 <= self.teacher_forcing_prob <= 1.0, "teacher_forcing_prob must be in [0, 1]")
        _require(0.0 <= self.teacher_forcing_decay <= 1.0, "teacher_forcing_decay must be in [0, 1]")

    def clip_threshold(self, epoch: int) -> float:
        """Element-wise clipping bound for an epoch."""
        if epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {epoch}")
        return self.clip_init * self.clip_decay ** epoch

    def teacher_forcing_probability(self, epoch: int) -> float:
        return self.teacher_forcing_prob * self.teacher_forcing_decay ** epoch


@dataclass
class DataConfig:
    """Cleaning, splitting, windowing and evaluation protocol"""

    cadence_seconds: int = 300  # nominal CGM cadence (5 minutes)
    gap_tolerance_seconds: int = 60  # jitter allowed on top of the cadence
    max_jump_mgdl: float = 40.0  # cleaning threshold
    split_ratio: Tuple[int, int, int] = (20, 1, 1)  # train : val : test, training first
    train_stride: int = 1  # stride for training windows only
    horizons: Tuple[int, ...] = (3, 6, 9, 12)  # 15/30/45/60 minutes

    # AR-I baseline: 9 lagged differences consume the 10 most recent points
    ar_order: int = 9
    ar_diff: int = 1

    def __post_init__(self):
        _require(self.cadence_seconds > 0, "cadence_seconds must be positive")
        _require(self.gap_tolerance_seconds >= 0, "gap_tolerance_seconds must be >= 0")
        _require(self.max_jump_mgdl > 0, "max_jump_mgdl must be positive")
        _require(len(self.split_ratio) == 3 and all(r >= 1 for r in self.split_ratio),
                 f"split_ratio must be three positive integers, got {self.split_ratio}")
        _require(self.train_stride >= 1, "train_stride must be >= 1")
        _require(len(self.horizons) >= 1 and all(h >= 1 for h in self.horizons),
                 f"horizons must be positive, got {self.horizons}")
        _require(self.ar_order >= 1, "ar_order must be >= 1")
        _require(self.ar_diff in (0, 1), f"ar_diff must be 0 or 1, got {self.ar_diff}")


@dataclass
class SyntheticConfig:
    """Synthetic CGM population generator parameters"""

    n_patients: int = 8
    n_days: int = 30
    start: str = "2021-01-04T00:00:00Z"  # a Monday
    outlier_rate: float = 0.0  # fraction of points carrying a spike

    # Per-patient draws (uniform over each range)
    baseline_range: Tuple[float, float] = (100.0, 160.0)
    circadian_amplitude_range: Tuple[float, float] = (10.0, 30.0)
    circadian_phase_range: Tuple[float, float] = (0.0, 24.0)  # hours
    meals_per_day_range: Tuple[int, int] = (2, 4)
    meal_hours_range: Tuple[float, float] = (6.0, 21.0)
    meal_amplitude_range: Tuple[float, float] = (30.0, 80.0)  # mg/dl peak
    meal_peak_minutes_range: Tuple[float, float] = (35.0, 75.0)
    weekend_shift_hours_range: Tuple[float, float] = (1.0, 3.0)
    smoothness_range: Tuple[float, float] = (0.6, 0.98)  # AR(1) coefficient of the noise
    noise_std: float = 8.0  # stationary std of the AR(1) noise, mg/dl

    outlier_magnitude_range: Tuple[float, float] = (15.0, 35.0)  # stays under the cleaning threshold
    clamp_range: Tuple[float, float] = (40.0, 400.0)

    def __post_init__(self):
        _require(self.n_patients >= 1, f"n_patients must be >= 1, got {self.n_patients}")
        _require(self.n_days >= 1, f"n_days must be >= 1, got {self.n_days}")
        _require(0.0 <= self.outlier_rate <= 1.0, f"outlier_rate must be in [0, 1], got {self.outlier_rate}")
        _require(self.noise_std >= 0, "noise_std must be >= 0")
        lo, hi = self.meals_per_day_range
        _require(1 <= lo <= hi, f"meals_per_day_range must be increasing positive, got {self.meals_per_day_range}")
        for name in ("baseline_range", "circadian_amplitude_range", "circadian_phase_range",
                     "meal_hours_range", "meal_amplitude_range", "meal_peak_minutes_range",
                     "weekend_shift_hours_range", "smoothness_range", "outlier_magnitude_range", "clamp_range"):
            lo, hi = getattr(self, name)
            _require(lo <= hi, f"{name} must be (low, high), got {(lo, hi)}")
        lo, hi = self.smoothness_range
        _require(0.0 <= lo and hi < 1.0, "smoothness_range must lie in [0, 1)")


@dataclass
class RunConfig:
    """Effective configuration of one CLI invocation"""

    seed: int = 0
    data_path: str = ""
    model_path: str = "model/forecaster.jsonl"
    output_path: str = ""
    cold_start: bool = False  # substitute the mean embedding for unknown patients

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        # the AR-I baseline forecasts from the encoder window alone
        history = self.data.ar_order + self.data.ar_diff
        _require(history <= self.model.t0,
                 f"ar_order + ar_diff = {history} exceeds t0 = {self.model.t0}; the AR-I baseline "
                 f"needs that many readings of every window")

    def to_flat_dict(self) -> Dict[str, Any]:
        """Flat key-value view, the same shape as the config file."""
        flat: Dict[str, Any] = {"version": CONFIG_VERSION}
        for name in _TOP_LEVEL_FIELDS:
            flat[name] = getattr(self, name)
        for section in _SECTIONS:
            flat.update(asdict(getattr(self, section)))
        return {key: list(value) if isinstance(value, tuple) else value for key, value in flat.items()}


_SECTIONS: Dict[str, type] = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "synthetic": SyntheticConfig,
}
_TOP_LEVEL_FIELDS = ("seed", "data_path", "model_path", "output_path", "cold_start")


def _field_owner() -> Dict[str, Optional[str]]:
    owners: Dict[str, Optional[str]] = {name: None for name in _TOP_LEVEL_FIELDS}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if f.name in owners:
                raise RuntimeError(f"config field '{f.name}' is declared twice")
            owners[f.name] = section
    return owners


_OWNERS = _field_owner()


def _coerce(key: str, value: Any, expected: Any) -> Any:
    """Check a JSON value against a dataclass annotation."""
    origin = getattr(expected, "__origin__", None)
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' must be a boolean, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' must be an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' must be a number, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{key}' must be a string, got {value!r}")
        return value
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{key}' must be a list, got {value!r}")
        args = expected.__args__
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(key, item, args[0]) for item in value)
        if len(value) != len(args):
            raise ConfigError(f"'{key}' must have {len(args)} entries, got {len(value)}")
        return tuple(_coerce(key, item, arg) for item, arg in zip(value, args))
    if origin is Union:
        return value
    return value


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Return a copy of the config with flat key-value overrides applied.

    Args:
        config: Base configuration
        overrides: Flat mapping of field name to value; None values are skipped

    Returns:
        New RunConfig; dataclass invariants are re-checked
    """
    top_hints = get_type_hints(RunConfig)
    top_updates: Dict[str, Any] = {}
    section_updates: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}

    for key, value in overrides.items():
        if value is None or key == "version":
            continue
        if key not in _OWNERS:
            logger.warning(f"Ignoring unknown config field: {key}")
            continue
        section = _OWNERS[key]
        if section is None:
            top_updates[key] = _coerce(key, value, top_hints[key])
        else:
            hints = get_type_hints(_SECTIONS[section])
            section_updates[section][key] = _coerce(key, value, hints[key])

    for section, updates in section_updates.items():
        if updates:
            top_updates[section] = replace(getattr(config, section), **updates)
    return replace(config, **top_updates)


def load_run_config(config_file: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load a flat JSON run configuration.

    Args:
        config_file: Path to the JSON file, or None for the built-in defaults

    Returns:
        Effective RunConfig
    """
    if config_file is None:
        return RunConfig()

    try:
        with open(config_file, 'r', encoding='utf-8') as f:
            config_dict = json.load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {config_file}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_file} is not valid JSON: {e}") from e

    if not isinstance(config_dict, dict):
        raise ConfigError(f"Config file {config_file} must hold a JSON object")
    version = config_dict.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"Config file {config_file} has version {version!r}, expected {CONFIG_VERSION}")

    return apply_overrides(RunConfig(), config_dict)

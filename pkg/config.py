import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables
load_dotenv()

T = TypeVar('T')


class BaseConfig:
    """Base configuration class."""

    # Application Settings
    APP_NAME = "trajmask"
    VERSION = "1.0.0"

    # Runtime Settings
    ENV = os.getenv('TRAJMASK_ENV', 'development')
    DEFAULT_SEED = int(os.getenv('TRAJMASK_SEED', 0))
    DEFAULT_WORKERS = int(os.getenv('TRAJMASK_WORKERS', 1))

    # Logging Settings
    LOG_LEVEL = os.getenv('TRAJMASK_LOG_LEVEL', 'INFO')
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s'
    LOG_DIR = os.getenv('TRAJMASK_LOG_DIR')
    JSON_LOGS = os.getenv('TRAJMASK_JSON_LOGS', 'false').lower() == 'true'

    # Artifact names inside an output directory
    CHECKPOINT_NAME = 'checkpoint.gmtm'
    LOSS_TRACE_NAME = 'loss_trace.jsonl'
    REPORT_TABLE_NAME = 'report.txt'
    REPORT_JSONL_NAME = 'report.jsonl'
    MANIFEST_SUFFIX = '.manifest.json'


class DevelopmentConfig(BaseConfig):
    """Development configuration."""

    DEBUG = True
    TESTING = False
    LOG_LEVEL = os.getenv('TRAJMASK_LOG_LEVEL', 'DEBUG')


class TestingConfig(BaseConfig):
    """Testing configuration."""

    DEBUG = True
    TESTING = True
    LOG_DIR = None


class ProductionConfig(BaseConfig):
    """Production configuration."""

    DEBUG = False
    TESTING = False
    JSON_LOGS = os.getenv('TRAJMASK_JSON_LOGS', 'true').lower() == 'true'


def get_config() -> Type[BaseConfig]:
    """Get configuration based on environment."""

    env = os.getenv('TRAJMASK_ENV', 'development')

    configs = {
        'development': DevelopmentConfig,
        'testing': TestingConfig,
        'production': ProductionConfig,
    }

    return configs.get(env, DevelopmentConfig)


@dataclass(frozen=True)
class StaypointConfig:
    """Thresholds for the staypoint sweep."""
    dist_threshold_m: float = 200.0
    time_threshold_s: float = 1200.0

    def __post_init__(self):
        if self.dist_threshold_m <= 0 or self.time_threshold_s <= 0:
            raise ConfigError("staypoint thresholds must be strictly positive")


@dataclass(frozen=True)
class MaskParams:
    """Knobs of the mask plan generator."""
    pretrain_ratio_range: Tuple[float, float] = (0.15, 0.5)
    random_ratio: float = 0.3
    split_fraction: float = 0.5

    def __post_init__(self):
        low, high = self.pretrain_ratio_range
        if not 0.0 <= low <= high <= 1.0:
            raise ConfigError(f"invalid pretrain ratio range {self.pretrain_ratio_range}")
        if not 0.0 <= self.random_ratio <= 1.0:
            raise ConfigError(f"random_ratio must be in [0, 1], got {self.random_ratio}")
        if not 0.0 < self.split_fraction <= 1.0:
            raise ConfigError(f"split_fraction must be in (0, 1], got {self.split_fraction}")


@dataclass(frozen=True)
class ModelConfig:
    """Encoder shape. Defaults follow the 4-layer, 256-wide, 4-head setup."""
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 4
    dropout_p: float = 0.1
    d_detail: int = 5
    vocab_size: int = 3
    max_len: int = 64
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.n_layers < 1 or self.d_model < 1 or self.n_heads < 1:
            raise ConfigError("n_layers, d_model and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.d_detail != 5:
            raise ConfigError("d_detail is fixed at 5")
        # at least one real category plus PAD and MASK
        if self.vocab_size < 3:
            raise ConfigError(f"vocab_size must be >= 3, got {self.vocab_size}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def n_classes(self) -> int:
        return self.vocab_size - 2


@dataclass(frozen=True)
class LossConfig:
    """Focal weighting (alpha, gamma) and the regression balance lam."""
    alpha: float = 0.5
    gamma: float = 2.0
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings."""
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 5000
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}")


def config_from_dict(cls: Type[T], data: Mapping[str, Any]) -> T:
    """Build a config dataclass from a mapping, ignoring unknown keys."""
    known = {f.name for f in fields(cls)}
    kwargs = {key: value for key, value in data.items() if key in known}
    if 'pretrain_ratio_range' in kwargs:
        kwargs['pretrain_ratio_range'] = tuple(kwargs['pretrain_ratio_range'])
    return cls(**kwargs)


def config_to_dict(cfg: Any) -> Dict[str, Any]:
    return asdict(cfg)


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """
    Load a JSON config file.

    A run manifest is accepted too: its resolved ``config`` object is returned,
    which is how a run is replayed from its manifest.

    Args:
        path: Path to the JSON file, or None

    Returns:
        Dict: Flat mapping of setting name to value
    """
    if path is None:
        return {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    if 'subcommand' in data and isinstance(data.get('config'), dict):
        return dict(data['config'])
    return data


def resolve_settings(
    cli: Mapping[str, Any],
    file: Mapping[str, Any],
    defaults: Mapping[str, Any]
) -> Dict[str, Any]:
    """Merge settings with precedence CLI flag > config file > default."""
    resolved = dict(defaults)
    for key in defaults:
        if cli.get(key) is not None:
            resolved[key] = cli[key]
        elif file.get(key) is not None:
            resolved[key] = file[key]
    return resolved


# Constants
EXIT_CODES = {
    'OK': 0,
    'FAILURE': 1,
    'USAGE': 2
}

ERROR_MESSAGES = {
    'EMPTY_DATASET': 'Dataset produced no training windows.',
    'VOCAB_MISMATCH': 'Checkpoint vocabulary does not match dataset vocabulary.',
    'MIXED_SCHEMA': 'Input mixes ping and stop records.',
    'MISSING_POIS': 'Ping input needs a POI table (--pois) to label stops.',
    'UNKNOWN_TASK': 'Unknown task name.',
}

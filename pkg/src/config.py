import json
import os
import sys
import logging
import dataclasses
import typing
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional

import appdirs

from .error_handler import ConfigurationError

APP_NAME = "MeanFlowActions"
CONFIG_DIR = appdirs.user_config_dir(APP_NAME)
CONFIG_FILE = os.path.join(CONFIG_DIR, 'config.json')
LOG_FILE = os.path.join(appdirs.user_log_dir(APP_NAME), 'app.log')

ACTIVATIONS = ('tanh', 'gelu')
SAMPLE_MODES = ('meanflow', 'euler_fm')
LR_SCHEDULES = ('constant', 'cosine')

logger = logging.getLogger(__name__)


def setup_logging(debug: bool = False, log_file: Optional[str] = None):
    """Setup logging to file and console"""
    log_file = log_file or LOG_FILE
    handlers = [logging.StreamHandler()]
    try:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    except OSError as e:
        print(f"Failed to setup file logging: {e}", file=sys.stderr)

    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )

    return logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Every training hyperparameter, including the swept ones"""
    flow_ratio: float = 0.2
    gamma: float = 0.5
    adaptive_c: float = 1e-3
    batch_size: int = 256
    steps: int = 2000
    learn_rate: float = 1e-3
    # cosine decays learn_rate to 0 over `steps`
    lr_schedule: str = 'cosine'
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    chunk_h: int = 20
    act_dim: int = 3
    # 0 means "take it from the dataset"
    cond_dim: int = 0
    hidden_dims: List[int] = field(default_factory=lambda: [128, 128])
    time_embed_dim: int = 8
    activation: str = 'tanh'
    normalize: bool = True
    log_every: int = 100

    def problems(self) -> List[str]:
        """Return a list of human-readable problems, empty when valid"""
        found = []
        if not 0.0 <= self.flow_ratio <= 1.0:
            found.append(f"flow_ratio must be in [0,1], got {self.flow_ratio}")
        if not 0.0 < self.gamma <= 1.0:
            found.append(f"gamma must be in (0,1], got {self.gamma}")
        if not self.adaptive_c > 0.0:
            found.append(f"adaptive_c must be > 0, got {self.adaptive_c}")
        if self.steps < 1:
            found.append(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            found.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learn_rate < 0.0:
            found.append(f"learn_rate must be >= 0, got {self.learn_rate}")
        if self.lr_schedule not in LR_SCHEDULES:
            found.append(f"lr_schedule must be one of {LR_SCHEDULES}, got '{self.lr_schedule}'")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            found.append("adam betas must be in [0,1)")
        if self.adam_eps <= 0.0:
            found.append(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.chunk_h < 1 or self.act_dim < 1:
            found.append("chunk_h and act_dim must be >= 1")
        if self.cond_dim < 0:
            found.append(f"cond_dim must be >= 0, got {self.cond_dim}")
        if any(h < 1 for h in self.hidden_dims):
            found.append(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            found.append(f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}")
        if self.activation not in ACTIVATIONS:
            found.append(f"activation must be one of {ACTIVATIONS}, got '{self.activation}'")
        if self.seed < 0:
            found.append(f"seed must be >= 0, got {self.seed}")
        return found

    def validate(self) -> 'TrainConfig':
        found = self.problems()
        if found:
            raise ConfigurationError("; ".join(found))
        return self

    @property
    def z_dim(self) -> int:
        """Flattened chunk dimension H * act_dim"""
        return self.chunk_h * self.act_dim

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SampleConfig:
    """How chunks are drawn from a trained field"""
    nfe: int = 1
    mode: str = 'meanflow'
    seed: int = 0

    def validate(self) -> 'SampleConfig':
        if self.nfe < 1:
            raise ConfigurationError(f"nfe must be >= 1, got {self.nfe}")
        if self.mode not in SAMPLE_MODES:
            raise ConfigurationError(f"mode must be one of {SAMPLE_MODES}, got '{self.mode}'")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _field_names(cls) -> List[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _type_ok(expected: Any, value: Any) -> bool:
    # bool is an int subclass; only bool fields accept it
    if expected is bool:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    if expected is float:
        return isinstance(value, (int, float))
    if expected is int:
        return isinstance(value, int)
    if expected is str:
        return isinstance(value, str)
    if expected == List[int]:
        return isinstance(value, list) and all(_type_ok(int, v) for v in value)
    if expected == List[float]:
        return isinstance(value, list) and all(_type_ok(float, v) for v in value)
    return True


def check_types(cls, data: Dict[str, Any], source: str = "<dict>"):
    """Raise ConfigurationError for values whose JSON type does not match the field"""
    hints = typing.get_type_hints(cls)
    wrong = [f"{k}={v!r} (expected {getattr(hints[k], '__name__', hints[k])})"
             for k, v in data.items() if k in hints and not _type_ok(hints[k], v)]
    if wrong:
        raise ConfigurationError(f"{source}: wrong type for {', '.join(wrong)}", "invalid_type")


def config_from_dict(cls, data: Dict[str, Any], source: str = "<dict>"):
    """Build a config dataclass from a mapping, rejecting unknown keys"""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: expected a JSON object, got {type(data).__name__}")
    known = set(_field_names(cls))
    unknown = sorted(k for k in data if k not in known)
    if unknown:
        raise ConfigurationError(f"{source}: unknown config key(s): {', '.join(unknown)}", "unknown_key")
    check_types(cls, data, source)
    cfg = cls(**data)
    return cfg.validate()


def get_config_file_path(path: Optional[str] = None) -> Optional[str]:
    """Explicit path first, then the per-user default file if present"""
    if path:
        return path
    if os.path.exists(CONFIG_FILE):
        return CONFIG_FILE
    return None


def load_train_config(path: Optional[str] = None) -> TrainConfig:
    """Load a TrainConfig from a JSON file; defaults when no file is found"""
    config_file = get_config_file_path(path)
    if config_file is None:
        logger.info("No config file given, using TrainConfig defaults")
        return TrainConfig()

    try:
        with open(config_file, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {config_file}", "missing") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{config_file}: invalid JSON ({e})") from e

    cfg = config_from_dict(TrainConfig, data, source=config_file)
    logger.info(f"Configuration loaded successfully from: {config_file}")
    return cfg


def save_config(cfg, path: str) -> str:
    """Save a config dataclass as indented JSON"""
    config_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(config_dir, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(cfg.to_dict(), f, indent=4)
    logger.info(f"Configuration saved successfully to: {path}")
    return path


def merge_overrides(cfg, overrides: Dict[str, Any]):
    """Apply non-None overrides (CLI flags) over a config and re-validate"""
    applied = {k: v for k, v in overrides.items() if v is not None}
    known = set(_field_names(type(cfg)))
    unknown = sorted(k for k in applied if k not in known)
    if unknown:
        raise ConfigurationError(f"unknown override(s): {', '.join(unknown)}", "unknown_key")
    check_types(type(cfg), applied, source="override")
    if applied:
        logger.debug(f"Config overrides: {applied}")
    return dataclasses.replace(cfg, **applied).validate()

import os
import logging
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv, dotenv_values

from errors import ConfigError

# Load environment variables
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

DEFAULT_CONFIG_PATH = os.getenv("TEEG_CONFIG")

# Common bipolar subset shared across CHB-MIT subjects
CANONICAL_MONTAGE: Tuple[str, ...] = (
    "FP1-F7", "F7-T7", "T7-P7", "P7-O1",
    "FP1-F3", "F3-C3", "C3-P3", "P3-O1",
    "FP2-F4", "F4-C4", "C4-P4", "P4-O2",
    "FP2-F8", "F8-T8", "T8-P8", "P8-O2",
    "FZ-CZ", "CZ-PZ",
)

ABLATION_MODES = ("full", "attention_only", "memory_only")


def setup_logging(level: Optional[str] = None) -> int:
    """Configure root logging from TEEG_LOG (error|info|debug)."""
    name = (level or os.getenv("TEEG_LOG", "info")).strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"TEEG_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format=LOG_FORMAT)
    logging.getLogger().setLevel(LOG_LEVELS[name])
    return LOG_LEVELS[name]


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline. Keys match the flat key=value config file."""
    # optimisation
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 16
    max_batch_segments: int = 192
    max_sequences_per_epoch: int = 512
    clip_norm: float = 5.0
    patience: int = 10
    seed: int = 7
    # context
    context_segments: int = 12
    attn_window: Optional[int] = None
    # tokenizer
    temporal_filters: int = 40
    spatial_filters: int = 40
    temporal_kernel: int = 40
    pool_window: int = 75
    pool_stride: int = 15
    segment_pooling: bool = True
    # backbone
    d_model: int = 64
    heads: int = 4
    head_dim: int = 16
    n_blocks: int = 1
    ablation_mode: str = "full"
    # alarm layer
    topk: int = 8
    fusion_window: int = 12
    fpr_cap: float = 0.5
    refractory_s: float = 1800.0
    # protocol
    val_fraction: float = 0.2
    gap_reference: str = "offset"
    excluded_seizures: List[str] = field(default_factory=list)
    # signal
    notch_hz: float = 60.0
    notch_q: float = 30.0
    band_low_hz: float = 0.5
    band_high_hz: float = 100.0
    band_order: int = 4
    montage: List[str] = field(default_factory=lambda: list(CANONICAL_MONTAGE))
    # synthetic data / runtime
    artifact_multiplier: float = 5.0
    synth_hours_per_gap: float = 1.5
    workers: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def window(self) -> int:
        """Attention window in tokens; follows the context unless pinned."""
        return self.attn_window if self.attn_window is not None else self.context_segments

    def validate(self):
        if self.context_segments not in (12, 60):
            raise ConfigError(f"context_segments must be 12 or 60, got {self.context_segments}")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"ablation_mode must be one of {ABLATION_MODES}, got {self.ablation_mode!r}")
        if self.gap_reference not in ("offset", "onset"):
            raise ConfigError(f"gap_reference must be 'offset' or 'onset', got {self.gap_reference!r}")
        if not 1 <= self.topk <= self.fusion_window:
            raise ConfigError(f"topk must lie in [1, fusion_window], got {self.topk}/{self.fusion_window}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("lr and epochs must be >= 0 and batch_size >= 1")
        if self.window < 1:
            raise ConfigError(f"attn_window must be >= 1, got {self.window}")
        if len(self.montage) != len(set(label.upper() for label in self.montage)):
            raise ConfigError("montage labels must be unique")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_env_text(self) -> str:
        """Serialize back to the key=value format read by load_config."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


# Short aliases accepted in config files
_ALIASES = {"attention_window": "attn_window", "learning_rate": "lr"}


def _coerce(name: str, raw: Any, default: Any, annotation: str) -> Any:
    if raw is None:
        return None
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if "List" in annotation:
            if isinstance(raw, list):
                return [str(v).strip() for v in raw]
            return [part.strip() for part in str(raw).split(",") if part.strip()]
        if "bool" in annotation:
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in annotation:
            if isinstance(raw, str) and raw.lower() in ("", "none"):
                return None
            return int(raw)
        if "float" in annotation:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {name!r}: cannot parse value {raw!r}")


def apply_overrides(config: PipelineConfig, overrides: Dict[str, Any]) -> PipelineConfig:
    """Return a new config with overrides applied (unknown keys are rejected)."""
    known = {f.name: f for f in fields(PipelineConfig)}
    values = config.to_dict()
    for key, raw in overrides.items():
        name = _ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if raw is None:
            continue
        f = known[name]
        annotation = str(f.type)
        values[name] = _coerce(name, raw, getattr(config, name), annotation)
    return PipelineConfig(**values)


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Read a flat key=value file (dotenv syntax), then apply flag overrides (flags win)."""
    config = PipelineConfig()
    path = path or DEFAULT_CONFIG_PATH
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        file_values = {k: v for k, v in dotenv_values(path).items()}
        config = apply_overrides(config, file_values)
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def save_config(config: PipelineConfig, path: str):
    with open(path, "w") as f:
        f.write(config.to_env_text())

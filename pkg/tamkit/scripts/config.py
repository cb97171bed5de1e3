"""
Run configuration.

A run is configured by a flat key=value file (same format as a .env file:
blank lines and # comments skipped, surrounding quotes stripped) plus
"--key value" command-line overrides. Precedence: command line > file >
defaults below. Unknown keys are rejected.
"""

import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from errors import ConfigError
from losses import AC_FORMS, LossWeights
from shapes_dataset import ShapeDatasetSpec
from toy_encoder import AugmentationPolicy, EncoderConfig, TrainConfig

CONCEPT_MODES = ("all_compounds", "class_related", "no_adjectives", "all_concepts")
DATASETS = ("synthetic", "files")
TAG_SOURCES = ("captions", "gt")
THREADS_ENV = "TAMKIT_THREADS"


@dataclass
class RunConfig:
    """Every setting of a train/infer run; each field has a default."""

    # paths ("" means bundled default or unused)
    dataset: str = "synthetic"
    captions: str = ""
    images_dir: str = ""
    gt_dir: str = ""
    vocab: str = ""
    lexicon_dir: str = ""
    irregulars: str = ""
    embeddings: str = ""
    output_dir: str = "tamkit/results/latest"

    # synthetic data
    num_images: int = 64
    num_test_images: int = 32
    image_size: int = 32
    max_shapes: int = 3
    mention_prob: float = 1.0
    embedding_dim: int = 16

    # encoder
    hidden_channels: str = "16,32"

    # optimization
    epochs: int = 15
    batch_size: int = 4
    lr_weights: float = 0.05
    lr_biases: float = 0.1
    weight_decay: float = 0.0005
    poly_power: float = 0.9
    head_lr_mult: float = 10.0
    seed: int = 0

    # loss weights
    lambda_cls: float = 1.0
    lambda_cpt: float = 0.3
    lambda_ac: float = 0.001

    # textual path
    w_res: float = 0.2

    # label estimation
    alpha: float = 1.0
    ac_form: str = "logsigmoid"

    # image tags: retrieved from the captions, or the ground-truth classes
    tag_source: str = "captions"

    # concept sampling
    concept_mode: str = "all_compounds"
    max_present_concepts: int = 10
    contrastive_images: int = 10
    contrastive_concepts: int = 50

    # augmentation
    scale_min: float = 1.0
    scale_max: float = 1.25
    crop_size: int = 0
    mirror_prob: float = 0.5

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return asdict(self)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_cls, self.lambda_cpt, self.lambda_ac)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_weights=self.lr_weights,
            lr_biases=self.lr_biases,
            weight_decay=self.weight_decay,
            poly_power=self.poly_power,
            head_lr_mult=self.head_lr_mult,
            seed=self.seed,
            weights=self.loss_weights(),
        )

    def augmentation(self) -> AugmentationPolicy:
        return AugmentationPolicy(self.scale_min, self.scale_max, self.crop_size, self.mirror_prob)

    def hidden_channel_tuple(self) -> Tuple[int, ...]:
        try:
            channels = tuple(int(c) for c in self.hidden_channels.split(",") if c.strip())
        except ValueError:
            raise ConfigError(f"hidden_channels must be comma-separated integers, got {self.hidden_channels!r}")
        if not channels:
            raise ConfigError("hidden_channels must name at least one layer")
        return channels

    def encoder_config(self, dim: Optional[int] = None) -> EncoderConfig:
        return EncoderConfig(hidden_channels=self.hidden_channel_tuple(), dim=dim or self.embedding_dim)

    def dataset_spec(self) -> ShapeDatasetSpec:
        return ShapeDatasetSpec(
            image_size=self.image_size, max_shapes=self.max_shapes, mention_prob=self.mention_prob
        )

    def validate(self) -> "RunConfig":
        """Raise ConfigError unless every derived config accepts these values."""
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.concept_mode not in CONCEPT_MODES:
            raise ConfigError(f"concept_mode must be one of {CONCEPT_MODES}, got {self.concept_mode!r}")
        if self.ac_form not in AC_FORMS:
            raise ConfigError(f"ac_form must be one of {AC_FORMS}, got {self.ac_form!r}")
        if self.tag_source not in TAG_SOURCES:
            raise ConfigError(f"tag_source must be one of {TAG_SOURCES}, got {self.tag_source!r}")
        if self.w_res < 0:
            raise ConfigError(f"w_res must be >= 0, got {self.w_res}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        for name in ("num_images", "embedding_dim", "max_present_concepts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("num_test_images", "contrastive_images", "contrastive_concepts"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.dataset == "files":
            for name in ("captions", "images_dir", "vocab", "embeddings"):
                if not getattr(self, name):
                    raise ConfigError(f"dataset=files needs {name} to be set")
            if self.tag_source == "gt" and not self.gt_dir:
                raise ConfigError("tag_source=gt needs gt_dir to be set")

        self.train_config()
        self.augmentation().crop_for(self.image_size)
        self.encoder_config()
        if self.dataset == "synthetic":
            self.dataset_spec()
        return self

    def echo(self) -> str:
        """Effective configuration as sorted key=value lines."""
        return "".join(f"{k}={format_value(v)}\n" for k, v in sorted(self.to_dict().items()))


def format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def compute_config_hash(config: RunConfig) -> str:
    """Compute hash of configuration for quick comparison."""
    config_str = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(config_str.encode()).hexdigest()[:16]


def load_config_file(path: Path) -> Dict[str, str]:
    """
    Read a key=value config file.

    Blank lines and lines starting with # are skipped; matching single or
    double quotes around a value are removed.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")

    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            # Skip empty lines and comments
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            # Remove quotes if present
            if value.startswith('"') and value.endswith('"') and len(value) >= 2:
                value = value[1:-1]
            elif value.startswith("'") and value.endswith("'") and len(value) >= 2:
                value = value[1:-1]
            values[key] = value
    return values


def parse_overrides(argv: Sequence[str]) -> Dict[str, str]:
    """
    Collect "--key value" and "--key=value" pairs; dashes in keys become underscores.
    """
    overrides = {}
    i = 0
    while i < len(argv):
        token = argv[i]
        if not token.startswith("--") or token == "--":
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(argv):
                raise ConfigError(f"option --{key} needs a value")
            value = argv[i + 1]
            i += 2
        overrides[key.replace("-", "_")] = value
    return overrides


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str) -> Any:
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}")
    return str(raw)


def build_config(
    file_values: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Defaults, then the config file, then command-line overrides; validated."""
    values: Dict[str, Any] = {}
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            values[key] = coerce(key, raw)
    return RunConfig(**values).validate()


def load_run_config(config_path: Optional[Path], override_args: Sequence[str] = ()) -> RunConfig:
    file_values = load_config_file(config_path) if config_path else {}
    return build_config(file_values, parse_overrides(list(override_args)))


def thread_limit(default: Optional[int] = None) -> int:
    """Worker threads for infer/eval, capped by TAMKIT_THREADS."""
    cpu = default or os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return cpu
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if cap < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {cap}")
    return min(cpu, cap)


def override_keys() -> List[str]:
    return sorted(_FIELD_TYPES)


class ConsoleFormatter(logging.Formatter):
    """INFO as bare messages; warnings and errors prefixed the way the scripts print them."""

    PREFIXES = {logging.WARNING: "Warning: ", logging.ERROR: "Error: ", logging.CRITICAL: "Error: "}

    def format(self, record: logging.LogRecord) -> str:
        message = record.getMessage()
        if record.levelno <= logging.DEBUG:
            return f"debug {record.name}: {message}"
        return self.PREFIXES.get(record.levelno, "") + message


def setup_logging(verbose: bool = False) -> None:
    """Route library logging to stderr; --verbose adds DEBUG records."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(ConsoleFormatter())
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, handlers=[handler], force=True)

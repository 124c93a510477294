import logging
import os
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'
RUN_LOG_FILE = "run.log"


def setup_logging(level="INFO"):
    """
    Console logging for the command-line tools

    The root level is set even when handlers already exist, so --log-level
    also governs the run.log mirror attached later.
    """
    numeric = getattr(logging, str(level).upper(), logging.INFO)
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    logging.getLogger().setLevel(numeric)
    return numeric


def attach_run_log(output_dir):
    """
    Mirror every log record of the current command into output_dir/run.log

    Returns:
        logging.Handler: The file handler; pass it to detach_run_log when the command ends
    """
    handler = logging.FileHandler(os.path.join(output_dir, RUN_LOG_FILE), encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_run_log(handler):
    if handler is not None:
        logging.getLogger().removeHandler(handler)
        handler.close()


logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Invalid run configuration; the message names the offending keys"""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ToyViTConfig(_Section):
    """Desk-scale ViT: 64 tokens of 4x4 patches, every submodule kind has D >= 3"""
    image_size: int = Field(32, gt=0)
    patch_size: int = Field(4, gt=0)
    in_chans: int = Field(1, gt=0)
    embed_dim: int = Field(32, gt=0)
    depth: int = Field(2, gt=0)
    heads: int = Field(4, gt=0)
    head_dim: int = Field(8, gt=0)
    mlp_dim: int = Field(64, gt=0)
    classes: int = Field(4, gt=1)

    @model_validator(mode="after")
    def _check_geometry(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim != self.heads * self.head_dim:
            raise ValueError(f"embed_dim {self.embed_dim} != heads*head_dim {self.heads * self.head_dim}")
        return self

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_pixels(self):
        return self.in_chans * self.patch_size ** 2


class SpaceConfig(_Section):
    """(lo, step) pairs per submodule kind; hi is always the full width"""
    qkv_lo: float = Field(1 / 4, gt=0, le=1)
    qkv_step: float = Field(1 / 8, gt=0, le=1)
    mlp_lo: float = Field(1 / 4, gt=0, le=1)
    mlp_step: float = Field(1 / 8, gt=0, le=1)
    heads_lo: int = Field(1, gt=0)
    heads_step: int = Field(2, gt=0)
    pe_lo: float = Field(1 / 2, gt=0, le=1)
    pe_step: float = Field(1 / 32, gt=0, le=1)


class TrainConfig(_Section):
    epochs: int = Field(30, gt=0)
    warmup_epochs: int = Field(6, ge=0)
    pretrain_epochs: int = Field(10, ge=0)
    retrain_epochs: int = Field(10, ge=0)
    baseline_epochs: int = Field(5, ge=0)
    batch_size: int = Field(32, gt=0)
    lr_main: float = Field(1e-3, gt=0)
    lr_score: float = Field(2e-2, gt=0)
    beta1_score: float = Field(0.5, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    tau: float = Field(0.5, gt=0, lt=1)
    finish_tolerance: float = Field(0.05, ge=0)
    prune_per_epoch: int = Field(3, gt=0)
    continue_after_finish: bool = False
    keep_rec_after_finish: bool = True
    sharing: Literal["bimask", "ordinal"] = "bimask"
    alpha_init: Literal["random", "uniform"] = "random"
    init_std: float = Field(1e-3, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_warmup(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        return self


class RegularizerWeights(_Section):
    mu1: float = Field(0.5, ge=0)
    mu2: float = Field(100.0, ge=0)
    mu3: float = Field(2e-5, ge=0)
    eta: float = Field(0.2, ge=0)
    use_entropy: bool = True
    use_variance: bool = True
    use_importance: bool = True


class PmimConfig(_Section):
    mode: Literal["progressive", "constant", "none"] = "progressive"
    gamma_start: float = Field(0.01, ge=0, le=1)
    gamma_end: float = Field(0.25, ge=0, le=1)


class SyntheticDatasetSpec(_Section):
    n_train: int = Field(2000, gt=0)
    n_eval: int = Field(1000, gt=0)
    classes: int = Field(4, gt=1)
    image_size: int = Field(32, gt=0)
    in_chans: int = Field(1, gt=0)
    generator: Literal["gaussian-blobs", "striped-textures"] = "gaussian-blobs"
    noise_sigma: float = Field(1.0, ge=0)
    seed: int = 1234
    path: Optional[str] = None


class RunConfig(_Section):
    model: ToyViTConfig = Field(default_factory=ToyViTConfig)
    space: SpaceConfig = Field(default_factory=SpaceConfig)
    trainer: TrainConfig = Field(default_factory=TrainConfig)
    regularizers: RegularizerWeights = Field(default_factory=RegularizerWeights)
    pmim: PmimConfig = Field(default_factory=PmimConfig)
    data: SyntheticDatasetSpec = Field(default_factory=SyntheticDatasetSpec)
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _check_data_matches_model(self):
        if self.data.image_size != self.model.image_size or self.data.in_chans != self.model.in_chans:
            raise ValueError("data.image_size/in_chans must match model.image_size/in_chans")
        if self.data.classes != self.model.classes:
            raise ValueError(f"data.classes {self.data.classes} != model.classes {self.model.classes}")
        return self


def parse_config_text(text):
    """
    Parse key=value lines with dotted namespaces into a nested dict

    Args:
        text: Config file contents

    Returns:
        dict: Nested mapping, e.g. {"trainer": {"tau": "0.5"}}
    """
    tree = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: key {key!r} nests under a scalar")
        node[parts[-1]] = value
    return tree


def _format_errors(err):
    messages = []
    for item in err.errors():
        location = ".".join(str(p) for p in item["loc"]) or "<root>"
        if item["type"] == "extra_forbidden":
            messages.append(f"unknown key '{location}'")
        else:
            messages.append(f"{location}: {item['msg']}")
    return "; ".join(messages)


def build_config(tree, overrides=None):
    """Validate a nested mapping (plus dotted-key overrides) into a RunConfig"""
    tree = {k: (dict(v) if isinstance(v, dict) else v) for k, v in tree.items()}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def with_overrides(config, overrides):
    """Copy of a validated RunConfig with dotted-key overrides applied"""
    return build_config(config.model_dump(), overrides)


def load_config(config_path=None, overrides=None):
    """
    Load and validate a run configuration file

    Args:
        config_path: Path to a key=value file, or None for all defaults
        overrides: Optional dotted-key overrides (CLI flags)

    Returns:
        RunConfig: The validated configuration
    """
    text = ""
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {config_path}: {e}") from None
        logger.info(f"Loaded configuration from {config_path}")
    return build_config(parse_config_text(text), overrides)


def flatten_config(config):
    """Resolved configuration as ordered (dotted key, value) pairs"""
    pairs = []

    def walk(prefix, value):
        if isinstance(value, dict):
            for k, v in value.items():
                walk(f"{prefix}.{k}" if prefix else k, v)
        else:
            pairs.append((prefix, value))

    walk("", config.model_dump())
    return pairs


def render_config(config):
    lines = []
    for key, value in flatten_config(config):
        if value is None:
            continue
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def save_resolved_config(config, out_dir):
    """
    Write the fully expanded configuration next to the run artifacts

    Returns:
        bool: True if the snapshot was written
    """
    path = os.path.join(out_dir, "resolved_config.txt")
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(render_config(config))
        logger.info(f"Resolved configuration written to {path}")
        return True
    except OSError as e:
        logger.error(f"Error writing resolved configuration to {path}: {e}")
        return False

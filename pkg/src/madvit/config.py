"""Flat key=value run configuration.

Every TrainConfig field maps one-to-one to a config-file key. Files hold one
`key=value` pair per line; blank lines and `#` comments are ignored; unknown
keys are rejected rather than silently dropped. Integer tuples are written as
comma-separated lists.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigKeyError, ConfigurationError
from .regularizers import REGULARIZER_KINDS


@dataclass(frozen=True)
class TrainConfig:
    # model shape
    input_size: int = 48
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    stage: int = 3
    B: int = 2              # local attention branches (0 disables the block)
    r: int = 4              # branch bottleneck reduction
    d: int = 128            # projection width == token dimension
    k: int = 8              # attention heads
    M: int = 4              # encoder blocks
    mlp_hidden: int = 256
    num_classes: int = 7
    # drop regularization
    p1: float = 0.6         # branch-map drop probability
    p2: float = 0.3         # head-output drop probability
    regularizer_kind: str = "mad"
    dropblock_size: int = 3
    # optimization
    lr: float = 0.04
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    lr_decay_epochs: tuple[int, ...] = (12, 24)
    lr_decay_factor: float = 10.0
    # data and bookkeeping
    seed: int = 0
    train_per_class: int = 100
    test_per_class: int = 50
    log_drops: bool = False

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.p1 <= 1.0 or not 0.0 <= self.p2 <= 1.0:
            raise ConfigurationError(f"p1/p2 must lie in [0, 1], got {self.p1}, {self.p2}")
        if self.lr < 0.0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lr_decay_factor <= 0.0:
            raise ConfigurationError(f"lr_decay_factor must be > 0, got {self.lr_decay_factor}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError(
                f"batch_size must be >= 1 and epochs >= 0, got {self.batch_size}, {self.epochs}")
        if self.B < 0:
            raise ConfigurationError(f"branch count must be >= 0, got {self.B}")
        if self.d % self.k != 0:
            raise ConfigurationError(f"d={self.d} not divisible by k={self.k} heads")
        if self.regularizer_kind not in REGULARIZER_KINDS:
            raise ConfigurationError(
                f"regularizer_kind {self.regularizer_kind!r} not one of {REGULARIZER_KINDS}")
        if any(e < 1 for e in self.lr_decay_epochs) or list(self.lr_decay_epochs) != sorted(self.lr_decay_epochs):
            raise ConfigurationError(f"lr_decay_epochs must be sorted positives, got {self.lr_decay_epochs}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigurationError("per-class sample counts must be >= 1")
        # stem and encoder shape constraints surface early here
        from .stem import StemConfig
        StemConfig(input_size=self.input_size, stage_channels=self.stage_channels,
                   blocks_per_stage=self.blocks_per_stage, output_stage=self.stage)
        from .encoder import ProjectionConfig
        ProjectionConfig(embed_dim=self.d, heads=self.k, blocks=self.M,
                         mlp_hidden=self.mlp_hidden, num_classes=self.num_classes)
        channels = self.stage_channels[self.stage - 1]
        if self.B > 0 and channels % self.r != 0:
            raise ConfigurationError(
                f"stage channels {channels} not divisible by branch reduction {self.r}")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind.startswith("tuple"):
            if not text:
                return ()
            return tuple(int(part) for part in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {key}={text!r} as {kind}") from exc


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(config: TrainConfig) -> str:
    lines = [f"{f.name}={_format_value(getattr(config, f.name))}" for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"


def parse_assignments(lines) -> dict:
    """Parse `key=value` lines into a validated dict of typed values."""
    values = {}
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"expected key=value, got {line!r}")
        key, _, text = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigKeyError(f"unknown config key {key!r} (valid: {sorted(_FIELD_TYPES)})")
        values[key] = _parse_value(key, text)
    return values


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        values = parse_assignments(f.read().splitlines())
    return replace(TrainConfig(), **values).validate()


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_to_text(config))


def build_config(path=None, overrides=(), seed=None) -> TrainConfig:
    """Defaults, then the config file, then --set overrides, then --seed."""
    config = TrainConfig()
    if path is not None:
        config = load_config(path)
    if overrides:
        config = replace(config, **parse_assignments(overrides))
    if seed is not None:
        config = replace(config, seed=int(seed))
    return config.validate()

"""Configuration dataclasses and the INI-style config file loader.

The file format is sectioned key-value text ([encoders], [sog], [head],
[training], [dataset]).  Unknown sections or keys are hard errors: a silently
ignored typo is the classic way an ablation run trains the wrong model.
Command-line overrides use the same dotted names (section.key=value).
"""

import configparser
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Tuple

from .errors import ConfigError
from .sog import EDGE_STRATEGIES, NODE_STRATEGIES


@dataclass
class ModelConfig:
    """Architecture and graph hyperparameters."""

    d_m: int = 256
    d_t: Optional[int] = None  # defaults to d_m so the modulation projections are square
    trunk_widths: Tuple[int, ...] = (16, 32, 64, 96, 128)
    k: int = 6
    p: float = 0.5
    dilations: Tuple[int, ...] = (1, 6, 12)
    edge_strategy: str = "erc"
    node_strategy: str = "knr"
    sog_enabled: bool = True

    def resolved_d_t(self) -> int:
        return self.d_m if self.d_t is None else self.d_t

    def validate(self) -> None:
        if self.d_m < 1:
            raise ConfigError(f"d_m must be positive, got {self.d_m}")
        if self.k < 1:
            raise ConfigError(f"k must be positive, got {self.k}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        if self.edge_strategy not in EDGE_STRATEGIES:
            raise ConfigError(
                f"edge_strategy {self.edge_strategy!r} not in {sorted(EDGE_STRATEGIES)}"
            )
        if self.node_strategy not in NODE_STRATEGIES:
            raise ConfigError(
                f"node_strategy {self.node_strategy!r} not in {sorted(NODE_STRATEGIES)}"
            )


@dataclass
class TrainConfig:
    """Optimization settings."""

    lr: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    batch_size: int = 16  # the reference protocol uses 64; set it here for that
    epochs: int = 40
    lambda_off: float = 5.0
    grad_clip: float = 10.0
    seed: int = 0
    eval_every: int = 1
    max_shift: int = 0  # random scene translation in pixels; 0 disables it
    # Random square symmetries (right-angle rotations and mirrorings) with the
    # matching rewrite of direction words in the expression.
    dihedral: bool = False

    def validate(self) -> None:
        # lr = 0 is allowed: it freezes the parameters, which is useful for
        # debugging runs and for verifying that training is the only thing
        # that mutates the model.
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.lambda_off < 0 or self.grad_clip <= 0:
            raise ConfigError("lambda_off must be >= 0 and grad_clip > 0")
        if self.max_shift < 0:
            raise ConfigError(f"max_shift must be >= 0, got {self.max_shift}")


@dataclass
class DataConfig:
    """Synthetic corpus settings."""

    seed: int = 0
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    image_size: int = 256
    hard_fraction: float = 0.6
    min_objects: int = 3
    max_objects: int = 6

    def validate(self) -> None:
        if self.image_size % 32 != 0 or self.image_size < 64:
            raise ConfigError(f"image_size must be >= 64 and divisible by 32, got {self.image_size}")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ConfigError(f"hard_fraction must lie in [0, 1], got {self.hard_fraction}")
        if not 3 <= self.min_objects <= self.max_objects <= 8:
            raise ConfigError(
                f"object count range must satisfy 3 <= min <= max <= 8, got "
                f"[{self.min_objects}, {self.max_objects}]"
            )
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one sample")


@dataclass
class RunConfig:
    """Everything a run needs, as parsed from file plus overrides."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.data.validate()


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str) -> Tuple[int, ...]:
    parts = [p for p in raw.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def _parse_optional_int(raw: str) -> Optional[int]:
    return None if raw.strip().lower() == "none" else int(raw)


# section -> key -> (dataclass attribute owner, parser)
_SCHEMA = {
    "encoders": {
        "d_m": ("model", int),
        "d_t": ("model", _parse_optional_int),
        "trunk_widths": ("model", _parse_int_tuple),
    },
    "sog": {
        "enabled": ("model", _parse_bool),
        "k": ("model", int),
        "p": ("model", float),
        "dilations": ("model", _parse_int_tuple),
        "edge_strategy": ("model", str),
        "node_strategy": ("model", str),
    },
    "head": {
        "lambda_off": ("train", float),
    },
    "training": {
        "lr": ("train", float),
        "lr_min": ("train", float),
        "weight_decay": ("train", float),
        "batch_size": ("train", int),
        "epochs": ("train", int),
        "grad_clip": ("train", float),
        "seed": ("train", int),
        "eval_every": ("train", int),
        "max_shift": ("train", int),
        "dihedral": ("train", _parse_bool),
    },
    "dataset": {
        "seed": ("data", int),
        "n_train": ("data", int),
        "n_val": ("data", int),
        "n_test": ("data", int),
        "image_size": ("data", int),
        "hard_fraction": ("data", float),
        "min_objects": ("data", int),
        "max_objects": ("data", int),
    },
}

# config keys whose dataclass attribute has a different name
_ATTR_NAME = {("sog", "enabled"): "sog_enabled"}


def _attr_for(section: str, key: str) -> str:
    return _ATTR_NAME.get((section, key), key)


def _apply_entry(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section not in _SCHEMA:
        raise ConfigError(
            f"unknown config section [{section}]; valid sections: {sorted(_SCHEMA)}"
        )
    if key not in _SCHEMA[section]:
        raise ConfigError(
            f"unknown key {key!r} in section [{section}]; valid keys: "
            f"{sorted(_SCHEMA[section])}"
        )
    owner, parser = _SCHEMA[section][key]
    try:
        value = parser(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc
    setattr(getattr(cfg, owner), _attr_for(section, key), value)


def load_config(path: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse a config file on top of defaults (or a given base config)."""
    cfg = base if base is not None else RunConfig()
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply_entry(cfg, section, key, raw)
    cfg.validate()
    return cfg


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply section.key=value strings on top of a parsed config."""
    for entry in overrides:
        if "=" not in entry or "." not in entry.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {entry!r}")
        dotted, raw = entry.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply_entry(cfg, section.strip(), key.strip(), raw.strip())
    cfg.validate()
    return cfg


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: RunConfig) -> str:
    """Render the fully-resolved config as file text (parseable back)."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (owner, _) in keys.items():
            value = getattr(getattr(cfg, owner), _attr_for(section, key))
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(dump_config(cfg))


def config_to_dict(cfg: RunConfig) -> dict:
    """Nested plain-python snapshot, e.g. for embedding in checkpoints."""
    return {"model": asdict(cfg.model), "train": asdict(cfg.train), "data": asdict(cfg.data)}


def config_from_dict(data: dict) -> RunConfig:
    def build(cls, values):
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                v = values[f.name]
                kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)

    return RunConfig(
        model=build(ModelConfig, data.get("model", {})),
        train=build(TrainConfig, data.get("train", {})),
        data=build(DataConfig, data.get("data", {})),
    )

"""Flat key-value experiment configuration.

A config file is plain text: one ``key = value`` per line, ``#`` starts a
comment. Every tunable constant is a named key with its default below;
unknown keys and malformed values are rejected with the offending line.
"""

from dataclasses import dataclass, fields

from .errors import ConfigError
from .pipeline import TrainConfig


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Training config plus dataset generation knobs."""

    train: TrainConfig
    n_scenes: int = 1000
    labeled_fraction: float = 0.1
    val_scenes: int = 200
    data_seed: int = 0

    def to_flat_dict(self):
        out = {}
        for f in fields(TrainConfig):
            out[f.name] = getattr(self.train, f.name)
        out.update({
            "n_scenes": self.n_scenes,
            "labeled_fraction": self.labeled_fraction,
            "val_scenes": self.val_scenes,
            "data_seed": self.data_seed,
        })
        return out


_DATA_SCHEMA = {
    "n_scenes": int,
    "labeled_fraction": float,
    "val_scenes": int,
    "data_seed": int,
}


def _train_schema():
    schema = {}
    for f in fields(TrainConfig):
        if f.type == "bool" or isinstance(f.default, bool):
            schema[f.name] = _parse_bool
        elif isinstance(f.default, int):
            schema[f.name] = int
        elif isinstance(f.default, float):
            schema[f.name] = float
        else:
            schema[f.name] = str
    return schema


def parse_config(text, overrides=None):
    """Parse config text into an ExperimentConfig, applying CLI overrides."""
    schema = _train_schema()
    schema.update(_DATA_SCHEMA)
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = schema[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: key {key!r}: {exc}") from None

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in schema:
            raise ConfigError(f"unknown override {key!r}")
        values[key] = value

    train_keys = {f.name for f in fields(TrainConfig)}
    try:
        train = TrainConfig(**{k: v for k, v in values.items() if k in train_keys})
    except ConfigError:
        raise
    data_kwargs = {k: v for k, v in values.items() if k in _DATA_SCHEMA}
    cfg = ExperimentConfig(train=train, **data_kwargs)
    if cfg.n_scenes < 1 or cfg.val_scenes < 0:
        raise ConfigError("n_scenes must be >= 1 and val_scenes >= 0")
    if not 0.0 <= cfg.labeled_fraction <= 1.0:
        raise ConfigError("labeled_fraction must be in [0, 1]")
    return cfg


def load_config(path, overrides=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def config_echo(cfg):
    """Render a config back to the key = value format (written next to outputs)."""
    lines = [f"{k} = {v}" for k, v in cfg.to_flat_dict().items()]
    return "\n".join(lines) + "\n"

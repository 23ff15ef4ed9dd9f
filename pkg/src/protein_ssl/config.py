"""Run configuration: defaults, validation, and the key=value file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path


@dataclass
class TrainConfig:
    """Every hyperparameter and ablation toggle for one run."""

    hidden_dim: int = 64
    gnn_layers: int = 2
    seq_dim: int = 32
    seq_mode: str = "toy"  # "toy" trains a small encoder; "frozen" reads a file
    embeddings: str = ""  # embedding file path, frozen mode only
    threshold: float = 7.0
    rbf_count: int = 16
    rbf_gamma: float = 10.0
    mask_ratio: float = 0.15
    bins: int = 30
    bin_lo: float = 2.0
    bin_hi: float = 22.0
    lr_gnn: float = 1e-3
    lr_lm: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    finetune_epochs: int = 5
    finetune_lr: float = 1e-4
    no_mutual: bool = False
    no_bilevel: bool = False
    no_angle: bool = False
    no_distance: bool = False
    distance_regression: bool = False

    def validate(self):
        if self.hidden_dim < 1 or self.gnn_layers < 1:
            raise ValueError("hidden_dim and gnn_layers must be at least 1")
        if self.seq_mode not in ("toy", "frozen"):
            raise ValueError(f"seq_mode must be 'toy' or 'frozen', got {self.seq_mode!r}")
        if self.seq_mode == "toy" and self.seq_dim < 1:
            raise ValueError("toy sequence encoder needs seq_dim >= 1")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.rbf_count < 2 or self.rbf_gamma <= 0:
            raise ValueError("need rbf_count >= 2 and rbf_gamma > 0")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.bins < 2 or not self.bin_lo < self.bin_hi:
            raise ValueError("need bins >= 2 and bin_lo < bin_hi")
        if self.epochs < 1 or self.batch_size < 1 or self.finetune_epochs < 1:
            raise ValueError("epochs, batch_size, finetune_epochs must be at least 1")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name, text):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    if kind == "bool":
        if text not in ("true", "false"):
            raise ValueError(f"{name}: expected true/false, got {text!r}")
        return text == "true"
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def config_to_text(cfg):
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def config_from_text(text, base=None):
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, value))
    return cfg


def load_config(path, base=None):
    return config_from_text(Path(path).read_text(), base=base)


def save_config(path, cfg):
    Path(path).write_text(config_to_text(cfg))


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings on top of a config, with validation."""
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in _FIELD_TYPES:
            raise ValueError(f"bad override {item!r} (expected known_key=value)")
        setattr(cfg, key, _parse_value(key, value))
    return cfg


def derive_seed(*parts):
    """Stable 64-bit seed from arbitrary labeled parts (order matters)."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")

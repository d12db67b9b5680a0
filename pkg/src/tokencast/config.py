"""Run configuration: one flat dataclass, INI-style files, key=value overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(Exception):
    """Unknown keys, unparsable values, or inconsistent settings."""


VARIANTS = ("full", "v1_no_align", "v2_prefix_prompt", "v3_static_lora", "v4_frozen")


@dataclass
class RunConfig:
    # data
    data_kind: str = "synthetic"  # or "csv"
    csv_path: str = ""
    date_column: str = "date"
    synthetic: str = "sine_mixture"
    channels: int = 3
    length: int = 2000
    noise: float = 0.0
    frequency: str = "hourly"
    train_frac: float = 0.7
    val_frac: float = 0.1
    lookback: int = 64
    horizon: int = 16
    stride: int = 1
    few_shot: float = 1.0
    global_standardize: bool = False
    dataset_name: str = ""
    # model
    dim: int = 64
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 256
    align_heads: int = 4
    rank: int = 8
    n_active: int = 4
    prompt_buckets: int = 64
    prompt_max_tokens: int = 32
    prompt_template: str = "forecast {dataset} horizon {horizon} frequency {frequency}"
    router_activation: str = "tanh"
    causal_mask: bool = False
    pretrain_mode: str = "random_frozen"
    pretrain_steps: int = 100
    normalize: bool = True
    variant: str = "full"
    # training
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 20
    lambda_lb: float = 0.01
    loss_kind: str = "mse"
    seed: int = 0
    patience: int = 3
    clip_norm: float = 5.0

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.data_kind not in ("synthetic", "csv"):
            raise ConfigError(f"data_kind must be synthetic or csv, got '{self.data_kind}'")
        if self.data_kind == "csv" and not self.csv_path:
            raise ConfigError("data_kind=csv requires csv_path")
        if self.lookback < 1 or self.horizon < 1:
            raise ConfigError("lookback and horizon must be positive")
        if not (1 <= self.n_active <= 7):
            raise ConfigError(f"n_active must be in [1, 7], got {self.n_active}")
        if self.loss_kind not in ("mse", "smape"):
            raise ConfigError(f"loss_kind must be mse or smape, got '{self.loss_kind}'")
        if not (0.0 < self.few_shot <= 1.0):
            raise ConfigError(f"few_shot must be in (0, 1], got {self.few_shot}")
        if self.lambda_lb < 0:
            raise ConfigError(f"lambda_lb must be >= 0, got {self.lambda_lb}")
        return self


# Named starting points. desk is the dataclass default; main_text and
# appendix size the trunk at the two larger reference scales.
PRESETS = {
    "desk": {},
    "appendix": {
        "layers": 8, "dim": 512, "heads": 8, "ffn_dim": 2048, "align_heads": 8,
        "rank": 8, "n_active": 4, "lookback": 512, "horizon": 96,
        "lr": 1e-3, "batch_size": 16, "epochs": 20, "loss_kind": "mse",
    },
    "main_text": {
        "layers": 8, "dim": 512, "heads": 8, "ffn_dim": 2048, "align_heads": 8,
        "rank": 4, "n_active": 4, "lookback": 96, "horizon": 48,
        "lr": 1e-2, "batch_size": 32, "epochs": 30, "loss_kind": "smape",
    },
}

_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        return raw
    except ValueError as e:
        raise ConfigError(f"key '{key}': {e}") from None


def _check_key(key: str) -> None:
    if key not in _FIELDS:
        known = ", ".join(sorted(_FIELDS))
        raise ConfigError(f"unknown config key '{key}'; valid keys: {known}")


def load_config_file(path) -> dict:
    """Parse an INI-style file into a flat key/value dict (sections are cosmetic)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in out:
                raise ConfigError(f"{path}: duplicate key '{key}'")
            out[key] = value
    return out


def build_config(file_values: dict | None = None, overrides: dict | None = None,
                 preset: str | None = None) -> RunConfig:
    """Priority: preset < config file < explicit overrides."""
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}'; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            _check_key(key)
            merged[key] = _coerce(key, value) if isinstance(value, str) else value
    cfg = RunConfig(**merged)
    return cfg.validate()


def parse_override(text: str) -> tuple[str, str]:
    """Split a --set argument of the form key=value."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, _, value = text.partition("=")
    return key.strip(), value

"""Flat key=value run configuration with dotted sections.

Every key has a typed default, may be set in a config file (one ``key=value``
per line, ``#`` comments), and may be overridden by a same-named CLI flag.
"""

from __future__ import annotations

from pathlib import Path

from .modeling import ConfigError, EncoderConfig, LoRAConfig
from .training import TrainConfig

DEFAULTS = {
    "encoder.image_size": 64,
    "encoder.patch_size": 8,
    "encoder.embed_dim": 64,
    "encoder.depth": 6,
    "encoder.heads": 4,
    "encoder.mlp_ratio": 4.0,
    "lora.enabled": True,
    "lora.rank": 4,
    "lora.scaling": 8.0,
    "lora.targets": "query,value",
    "lora.adapt_all_blocks": True,
    "train.epochs": 30,
    "train.batch_size": 32,
    "train.learning_rate": 1e-3,
    "train.weight_decay": 0.01,
    "train.anneal_horizon": 10,
    "train.selection_metric": "macro_f1",
    "train.flip_augment": False,
    "preprocess.mean": 0.5,
    "preprocess.std": 0.5,
    "calibration.compare_to": "initial",
    "eval.normal_label": "normal",
    "split.ratios": "6,2,2",
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        token = raw.strip().lower()
        if token in _TRUE:
            return True
        if token in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return raw


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return values


class RunConfig:
    """Merged configuration: defaults < config file < CLI flags."""

    def __init__(self, file_values: dict = None, overrides: dict = None):
        self.values = dict(DEFAULTS)
        if file_values:
            self.values.update(file_values)
        if overrides:
            for key, raw in overrides.items():
                if raw is None:
                    continue
                if key not in DEFAULTS:
                    raise ConfigError(f"unknown config key {key!r}")
                self.values[key] = _coerce(key, raw) if isinstance(raw, str) else raw

    def __getitem__(self, key: str):
        return self.values[key]

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self["encoder.image_size"],
            patch_size=self["encoder.patch_size"],
            embed_dim=self["encoder.embed_dim"],
            depth=self["encoder.depth"],
            heads=self["encoder.heads"],
            mlp_ratio=self["encoder.mlp_ratio"],
        )

    def lora_config(self) -> LoRAConfig | None:
        if not self["lora.enabled"]:
            return None
        targets = tuple(t.strip() for t in self["lora.targets"].split(",") if t.strip())
        return LoRAConfig(
            rank=self["lora.rank"],
            scaling=self["lora.scaling"],
            targets=targets,
            adapt_all_blocks=self["lora.adapt_all_blocks"],
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            learning_rate=self["train.learning_rate"],
            weight_decay=self["train.weight_decay"],
            anneal_horizon=self["train.anneal_horizon"],
            seed=seed,
            selection_metric=self["train.selection_metric"],
            flip_augment=self["train.flip_augment"],
        )

    def ratios(self) -> tuple:
        parts = [p.strip() for p in self["split.ratios"].split(",")]
        if len(parts) != 3:
            raise ConfigError("split.ratios must have three comma-separated numbers")
        try:
            return tuple(float(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"split.ratios: {exc}") from exc

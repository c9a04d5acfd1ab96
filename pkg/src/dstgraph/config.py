"""Flat ``section.key = value`` experiment configuration."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # attribute names are dotted keys with the first "." replaced by "_"
    data_path: str = ""  # "synthetic" selects the built-in two-sinusoid table
    data_name: str = ""
    data_timestamp_column: str = "date"
    data_channels: str = ""  # comma-separated names; empty means every column
    data_first_channels: int = 0  # keep only the first N channels; 0 keeps all
    data_resolution: str = ""
    data_delimiter: str = ","
    data_lookback: int = 336
    data_horizon: int = 96
    data_stride: int = 1
    data_train_fraction: float = 0.7
    data_val_fraction: float = 0.1
    data_test_fraction: float = 0.2
    data_synthetic_steps: int = 5000
    data_synthetic_noise: float = 0.1

    decomposition_period: int = 24
    decomposition_trend_window: int = 0  # 0 -> next odd >= period + 1
    decomposition_block_window: int = 3
    decomposition_block_stride: int = 1

    graph_k: int = 3
    graph_trend_factor: int = 0  # 0 -> period
    graph_seasonal_factor: int = 1
    graph_residual_factor: int = 0  # 0 -> period
    graph_band: int = 0  # 0 -> unconstrained

    model_tcn_layers: int = 3
    model_tcn_kernel: int = 3
    model_gat_hidden: int = 0  # 0 -> lookback
    model_gat_heads: int = 1
    model_gat_layers: int = 1

    train_lr: float = 0.0001
    train_batch_size: int = 32
    train_max_epochs: int = 50
    train_patience: int = 5
    train_seed: int = 0
    train_seeds: str = "0"  # comma-separated, used by multi-seed evaluation

    eval_setting: str = "MIMO"
    eval_target_channel: int = -1

    ablation_use_decomposition: bool = True
    ablation_use_time_embedding: bool = True
    ablation_use_temporal: bool = True
    ablation_use_spatial: bool = True

    def __post_init__(self):
        if self.eval_setting not in ("MIMO", "MISO", "SISO"):
            raise ConfigError(f"eval.setting must be MIMO, MISO or SISO, got {self.eval_setting!r}")
        if self.train_lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.train_patience > self.train_max_epochs:
            raise ConfigError("train.patience must not exceed train.max_epochs")

    @staticmethod
    def keys() -> list[str]:
        return [_dotted(f.name) for f in fields(ExperimentConfig)]

    def to_flat(self) -> dict[str, object]:
        return {_dotted(f.name): getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_flat().items())

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def override(self, updates: dict[str, str | object]) -> ExperimentConfig:
        by_key = {_dotted(f.name): f for f in fields(self)}
        changes = {}
        for key, raw in updates.items():
            if key not in by_key:
                raise ConfigError(f"unknown config key {key!r}")
            f = by_key[key]
            changes[f.name] = _parse(raw, f.type, key) if isinstance(raw, str) else raw
        return dataclasses.replace(self, **changes)

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.train_seeds.split(",") if s.strip()]

    @property
    def channel_list(self) -> list[str] | None:
        names = [c.strip() for c in self.data_channels.split(",") if c.strip()]
        return names or None

    @property
    def dataset_name(self) -> str:
        return self.data_name or (Path(self.data_path).stem if self.data_path else "dataset")


def _dotted(name: str) -> str:
    section, _, key = name.partition("_")
    return f"{section}.{key}"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(raw: str, type_name, key: str):
    raw = raw.strip()
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if type_name == "bool":
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type_name}") from None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return ExperimentConfig().override(values)

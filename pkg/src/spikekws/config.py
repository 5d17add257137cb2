"""Flat dotted-key run configuration.

A config file is plain text, one ``section.key = value`` per line, with
``#`` comments. Unknown keys are rejected, missing keys take the
documented defaults, and the resolved config can be echoed back out in a
form that parses to an identical RunConfig.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import AugmentConfig
from .model import ModelConfig
from .tensor import ConfigError
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    path: str = ""
    delta_t_ms: float = 10.0
    neuron_bin: int = 5
    target_t: int = 100


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    augment: AugmentConfig
    augment_enabled: bool = False


# key -> (section, dataclass field); the short public names follow the
# section.key convention, field names stay internal
_SCHEMA = {
    "model.blocks": ("model", "blocks_n"),
    "model.heads": ("model", "heads_h"),
    "model.hidden": ("model", "hidden_d"),
    "model.input_neurons": ("model", "input_neurons_n"),
    "model.window_radius": ("model", "window_radius_w"),
    "model.time_steps": ("model", "time_steps_t"),
    "model.expansion_alpha": ("model", "expansion_alpha"),
    "model.classes": ("model", "classes_y"),
    "model.dropout": ("model", "dropout_p"),
    "model.input_kind": ("model", "input_kind"),
    "train.lr": ("train", "lr"),
    "train.weight_decay": ("train", "weight_decay"),
    "train.epochs": ("train", "epochs"),
    "train.batch_size": ("train", "batch_size"),
    "train.scheduler_t_max": ("train", "scheduler_t_max"),
    "train.seed": ("train", "seed"),
    "train.grad_clip": ("train", "grad_clip"),
    "train.val_fraction": ("train", "val_fraction"),
    "data.path": ("data", "path"),
    "data.delta_t_ms": ("data", "delta_t_ms"),
    "data.neuron_bin": ("data", "neuron_bin"),
    "data.target_t": ("data", "target_t"),
    "augment.enabled": ("augment", "enabled"),
    "augment.drop_proportion_pct": ("augment", "drop_proportion_pct"),
    "augment.time_drop_pct": ("augment", "time_drop_pct"),
    "augment.neuron_drop_count": ("augment", "neuron_drop_count"),
    "augment.freq_masks": ("augment", "freq_masks"),
    "augment.freq_mask_bins": ("augment", "freq_mask_bins"),
    "augment.time_masks": ("augment", "time_masks"),
    "augment.time_mask_pct": ("augment", "time_mask_pct"),
}

_DEFAULTS = {
    "model": ModelConfig(),
    "train": TrainConfig(),
    "data": DataConfig(),
    "augment": AugmentConfig(),
}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key == "train.grad_clip":
            return None if raw.lower() in ("none", "") else float(raw)
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {
        sec: {f.name: getattr(obj, f.name) for f in obj.__dataclass_fields__.values()}
        for sec, obj in (
            ("model", _DEFAULTS["model"]),
            ("train", _DEFAULTS["train"]),
            ("data", _DEFAULTS["data"]),
            ("augment", _DEFAULTS["augment"]),
        )
    }
    values["augment"]["enabled"] = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        entry = _SCHEMA.get(key)
        if entry is None:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        section, field_name = entry
        default = values[section][field_name]
        if key == "train.grad_clip":
            default = None
        values[section][field_name] = _parse_value(key, raw, default)
    augment_enabled = values["augment"].pop("enabled")
    try:
        return RunConfig(
            model=ModelConfig(**values["model"]),
            train=TrainConfig(**values["train"]),
            data=DataConfig(**values["data"]),
            augment=AugmentConfig(**values["augment"]),
            augment_enabled=augment_enabled,
        )
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), source=str(path))


def echo_config(cfg: RunConfig) -> str:
    """Render every resolved key; parsing the result reproduces ``cfg``."""
    sections = {
        "model": cfg.model,
        "train": cfg.train,
        "data": cfg.data,
        "augment": cfg.augment,
    }
    lines = []
    for key in sorted(_SCHEMA):
        section, field_name = _SCHEMA[key]
        if key == "augment.enabled":
            value = cfg.augment_enabled
        else:
            value = getattr(sections[section], field_name)
        if value is None:
            value = "none"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

"""Experiment configuration: an INI file with flat sections, overridable by CLI flags.

Precedence, lowest to highest: built-in defaults, the config file, command-line
flags. Recognized keys::

    [data]
    manifest = data/manifest.json
    fc_zscore = false

    [model]
    preset = auto            ; auto | desk | full (backbone stacks)
    fmri_blocks =            ; "out:kernel:stride:padding, ..." overrides the preset
    smri_blocks =
    activation = relu
    norm = none              ; none | batch | instance
    d2 =                     ; defaults to the backbone's final channel count
    hidden = 128
    head_activation = relu
    ca_value_source = query  ; query | key

    [train]
    fusion_mode = camf
    learning_rate = 0.001
    weight_decay = 0.0001
    max_epochs = 100
    batch_size = 32
    early_stop_patience = 10
    eval_batch_size =        ; empty: whole split per attention batch
    seed = 0

    [output]
    dir = runs
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from camf.backbones import (
    DESK_FMRI,
    DESK_SMRI,
    FULL_FMRI,
    FULL_GRID,
    FULL_ROI_COUNT,
    FULL_SMRI,
    BackboneConfig,
    ConvBlock,
)
from camf.errors import ConfigError
from camf.fusion import ModelConfig
from camf.training import TrainConfig, config_hash

PRESETS = ("auto", "desk", "full")
SECTIONS = {
    "data": {"manifest", "fc_zscore"},
    "model": {
        "preset", "fmri_blocks", "smri_blocks", "activation", "norm", "d2", "hidden",
        "head_activation", "ca_value_source",
    },
    "train": {
        "fusion_mode", "learning_rate", "weight_decay", "max_epochs", "batch_size",
        "early_stop_patience", "eval_batch_size", "seed",
    },
    "output": {"dir"},
}


def parse_blocks(text: str) -> tuple[ConvBlock, ...]:
    try:
        return tuple(ConvBlock(*(int(v) for v in item.split(":"))) for item in text.split(",") if item.strip())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad conv block list {text!r}: expected out:kernel:stride:padding") from exc


def format_blocks(blocks) -> str:
    return ", ".join(f"{b.out_channels}:{b.kernel}:{b.stride}:{b.padding}" for b in blocks)


@dataclass
class ModelSettings:
    preset: str = "auto"
    fmri_blocks: str = ""
    smri_blocks: str = ""
    activation: str = "relu"
    norm: str = "none"
    d2: int | None = None
    hidden: int = 128
    head_activation: str = "relu"
    ca_value_source: str = "query"

    def build(self, roi_count: int, grid_shape, fusion_mode: str) -> ModelConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}")
        preset = self.preset
        if preset == "auto":
            full = roi_count == FULL_ROI_COUNT and tuple(grid_shape) == FULL_GRID
            preset = "full" if full else "desk"
        fmri, smri = (FULL_FMRI, FULL_SMRI) if preset == "full" else (DESK_FMRI, DESK_SMRI)
        norm = None if self.norm in ("", "none") else self.norm
        fmri_blocks = parse_blocks(self.fmri_blocks) if self.fmri_blocks else fmri.conv_blocks
        smri_blocks = parse_blocks(self.smri_blocks) if self.smri_blocks else smri.conv_blocks
        fmri = BackboneConfig(fmri_blocks, 2, self.activation, norm)
        smri = BackboneConfig(smri_blocks, 3, self.activation, norm)
        cfg = ModelConfig(
            fmri_backbone=fmri,
            smri_backbone=smri,
            roi_count=roi_count,
            grid_shape=tuple(grid_shape),
            d2=self.d2 if self.d2 is not None else fmri.final_channels,
            hidden=self.hidden,
            head_activation=self.head_activation,
            fusion_mode=fusion_mode,
            ca_value_source=self.ca_value_source,
        )
        cfg.validate()
        return cfg


@dataclass
class ExperimentConfig:
    manifest: str | None = None
    fc_zscore: bool = False
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"

    @property
    def seed(self) -> int:
        return self.train.seed

    def validate(self) -> None:
        self.train.fc_zscore = self.fc_zscore
        self.train.validate()
        if self.model.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}")
        if self.model.fmri_blocks:
            parse_blocks(self.model.fmri_blocks)
        if self.model.smri_blocks:
            parse_blocks(self.model.smri_blocks)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["data"] = {"manifest": self.manifest or "", "fc_zscore": str(self.fc_zscore).lower()}
        cp["model"] = {
            k: "" if v is None else str(v) for k, v in dataclasses.asdict(self.model).items()
        }
        cp["train"] = {
            k: "" if v is None else str(v)
            for k, v in dataclasses.asdict(self.train).items()
            if k in SECTIONS["train"]
        }
        cp["output"] = {"dir": self.output_dir}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}".rstrip() for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        # where results go does not change what is computed
        ini = self.to_ini().split("[output]")[0]
        return config_hash({"ini": ini})


def _coerce(value: str, kind):
    value = value.strip()
    if kind is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off", ""):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if value == "":
        return None
    return kind(value)


_TRAIN_TYPES = {
    "fusion_mode": str, "learning_rate": float, "weight_decay": float, "max_epochs": int,
    "batch_size": int, "early_stop_patience": int, "eval_batch_size": int, "seed": int,
}
_MODEL_TYPES = {
    "preset": str, "fmri_blocks": str, "smri_blocks": str, "activation": str, "norm": str,
    "d2": int, "hidden": int, "head_activation": str, "ca_value_source": str,
}


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI file (optional) and apply ``overrides`` given as ``section.key -> value``."""
    cfg = ExperimentConfig()
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            unknown = set(cp[section]) - SECTIONS[section]
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
            raw[section] = dict(cp[section])
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".")
        raw.setdefault(section, {})[key] = str(value)

    try:
        data = raw.get("data", {})
        if "manifest" in data:
            cfg.manifest = data["manifest"] or None
        if "fc_zscore" in data:
            cfg.fc_zscore = _coerce(data["fc_zscore"], bool)
        for key, value in raw.get("model", {}).items():
            parsed = _coerce(value, _MODEL_TYPES[key])
            if parsed is None and _MODEL_TYPES[key] is str:
                parsed = ""
            setattr(cfg.model, key, parsed)
        for key, value in raw.get("train", {}).items():
            parsed = _coerce(value, _TRAIN_TYPES[key])
            if parsed is None and key != "eval_batch_size":
                continue
            setattr(cfg.train, key, parsed)
        if "dir" in raw.get("output", {}):
            cfg.output_dir = raw["output"]["dir"]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    cfg.validate()
    return cfg

"""Training configuration and its flat TOML file format.

Example file::

    seed = 7
    arch = "compact"
    epoch_scale = 0.1
    stage2_epochs = 200
    synth_n = 3000

Every key mirrors a :class:`TrainConfig` field; unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

import tomli

from .errors import ContractError, ParseError
from .losses import LossWeights
from .networks import ARCHITECTURES, Architecture
from .stn import CropGeometry


@dataclass(frozen=True)
class TrainConfig:
    d_i: int = 128
    d_c: int = 64
    scale: float = 0.5
    kappa: float = 1.0
    stage1_epochs: int = 50
    stage1_lr: float = 1e-3
    stage2_epochs: int = 200
    stage2_lr: float = 1e-4
    stage3_epochs: int = 100
    stage3_lr: float = 1e-4
    baseline_epochs: int = 200
    baseline_lr: float = 1e-3
    # Multiplies every epoch count; 1.0 restores the literal schedule.
    epoch_scale: float = 0.1
    batch_size: int = 32
    folds: int = 5
    seed: int = 0
    arch: str = "standard"
    # Draw fresh crop offsets from each sample's context every epoch.
    reoffset_each_epoch: bool = True
    augment: bool = True
    balance: bool = True
    # Data source: a manifest/annotation CSV, or an in-memory synthetic set.
    data: str = ""
    image_root: str = ""
    synth_n: int = 300

    def __post_init__(self):
        for name in ("stage1_lr", "stage2_lr", "stage3_lr", "baseline_lr"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        for name in ("stage1_epochs", "stage2_epochs", "stage3_epochs", "baseline_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.epoch_scale <= 0:
            raise ContractError("epoch_scale must be positive")
        if self.folds < 2:
            raise ContractError("folds must be >= 2")
        if self.arch not in ARCHITECTURES:
            raise ContractError(f"arch must be one of {sorted(ARCHITECTURES)}, got {self.arch!r}")
        LossWeights(self.kappa)
        CropGeometry(self.d_i, self.d_c, self.scale)

    @property
    def geometry(self) -> CropGeometry:
        return CropGeometry(self.d_i, self.d_c, self.scale)

    @property
    def architecture(self) -> Architecture:
        return ARCHITECTURES[self.arch]

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.kappa)

    def epochs(self, stage: str) -> int:
        """Epoch count for ``stage`` after applying ``epoch_scale`` (at least 1)."""
        return max(1, int(round(getattr(self, f"{stage}_epochs") * self.epoch_scale)))

    def lr(self, stage: str) -> float:
        return getattr(self, f"{stage}_lr")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, value):
    kind = FIELD_TYPES[key]
    if kind in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(f"{key} must be an integer, got {value!r}")
        return value
    if kind in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(f"{key} must be a number, got {value!r}")
        return float(value)
    if kind in ("bool", bool):
        if not isinstance(value, bool):
            raise ParseError(f"{key} must be true or false, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ParseError(f"{key} must be a string, got {value!r}")
    return value


def config_from_mapping(values: Dict[str, Any], base: Optional[TrainConfig] = None) -> TrainConfig:
    unknown = sorted(set(values) - set(FIELD_TYPES))
    if unknown:
        raise ParseError(f"unknown config key(s): {', '.join(unknown)}")
    coerced = {k: _coerce(k, v) for k, v in values.items()}
    return replace(base or TrainConfig(), **coerced)


def load_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ParseError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ParseError(f"{path}: tables are not supported ({', '.join(nested)}); use flat keys")
    cfg = config_from_mapping(raw, base)
    if cfg.data and not Path(cfg.data).is_absolute():
        cfg = replace(cfg, data=str((path.parent / cfg.data).resolve()))
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"

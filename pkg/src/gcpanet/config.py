"""Run configuration: a YAML file validated against the library's config types.

Example (desk scale)::

    model:
      backbone: {kind: tiny}
      width: 32
    train:
      epochs: 200
      batch_size: 8
      resize: 72
      crop: 64
    data:
      root: data
      train: synthetic
      eval_size: 64
    output_dir: runs/tiny

``GCPA_DATA_ROOT`` in the environment overrides ``data.root``.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import List, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .backbone import BackboneConfig
from .blocks import DECODER_WIDTH, REDUCTION
from .data import EVAL_SIZE
from .network import AblationFlags, ModelConfig
from .trainer import TrainConfig

DATA_ROOT_ENV = "GCPA_DATA_ROOT"

for _cls in (BackboneConfig, AblationFlags, TrainConfig):
    _cls.__pydantic_config__ = ConfigDict(extra="forbid")


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    width: int = Field(DECODER_WIDTH, ge=1)
    reduction: int = Field(REDUCTION, ge=1)

    def build(self, flags: AblationFlags) -> ModelConfig:
        return ModelConfig(backbone=self.backbone, width=self.width, reduction=self.reduction, flags=flags)


class DataSection(_Section):
    root: str = "data"
    train: str = "DUTS-TR"
    test: List[str] = Field(default_factory=list)
    eval_size: int = Field(EVAL_SIZE, ge=16)


class EvalSection(_Section):
    beta2: float = Field(0.3, gt=0)
    alpha: float = Field(0.5, ge=0, le=1)


class Variant(_Section):
    name: str
    flags: AblationFlags


def default_variants() -> List[Variant]:
    steps = [
        ("baseline", dict(use_fia=False, use_sr=False, use_ha=False, use_gcf=False)),
        ("+FIA", dict(use_fia=True, use_sr=False, use_ha=False, use_gcf=False)),
        ("+SR", dict(use_fia=True, use_sr=True, use_ha=False, use_gcf=False)),
        ("+HA", dict(use_fia=True, use_sr=True, use_ha=True, use_gcf=False)),
        ("+GCF", dict(use_fia=True, use_sr=True, use_ha=True, use_gcf=True)),
    ]
    return [Variant(name=n, flags=AblationFlags(**f)) for n, f in steps]


class AblationSection(_Section):
    variants: List[Variant] = Field(default_factory=default_variants)
    shared_pair: bool = True


class RunConfig(_Section):
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataSection = Field(default_factory=DataSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    ablation: AblationSection = Field(default_factory=AblationSection)
    output_dir: str = "runs/default"

    def model_cfg(self, flags: Optional[AblationFlags] = None) -> ModelConfig:
        return self.model.build(flags or self.train.ablation_flags)

    def data_root(self) -> Path:
        return Path(os.environ.get(DATA_ROOT_ENV) or self.data.root)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"{'.'.join(map(str, e['loc'])) or '<root>'}: {e['msg']}" for e in exc.errors()]
        raise ConfigError(f"invalid config {path}:\n  " + "\n  ".join(lines)) from None


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))

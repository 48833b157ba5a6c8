"""SGD training loop, learning-rate schedule, checkpoints and ablation variants.

Checkpoint format: one safetensors file. Tensors are stored under
``model/<state_dict key>`` and ``optim/<parameter name>`` (momentum buffers).
The header metadata holds ``format`` (``gcpanet-checkpoint``), ``version``,
``step`` and ``config`` (JSON with ``train`` and ``model`` sections).
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import torch
import torch.nn as nn
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from .backbone import BackboneConfig
from .data import TRAIN_CROP, TRAIN_RESIZE, DatasetIndex, batches
from .network import AblationFlags, GCPANet, LossConfig, ModelConfig, compute_losses

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gcpanet-checkpoint"
CHECKPOINT_VERSION = "1"
LOG_FIELDS = ["step", "lr_backbone", "lr_head", "loss_dom", "loss_aux1", "loss_aux2", "loss_aux3",
              "loss_total"]


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_lr_backbone: float = 5e-3
    max_lr_head: float = 0.05
    warmup_fraction: float = 1 / 30
    seed: int = 0
    ablation_flags: AblationFlags = field(default_factory=AblationFlags)
    lambdas: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    augment: bool = True
    resize: int = TRAIN_RESIZE
    crop: int = TRAIN_CROP
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.ablation_flags, dict):
            self.ablation_flags = AblationFlags(**self.ablation_flags)
        if not 0 < self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.max_lr_backbone < 0 or self.max_lr_head < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    params: Dict[str, torch.Tensor]
    optimizer_state: Dict[str, torch.Tensor]
    step: int
    config_snapshot: dict
    log: List[dict] = field(default_factory=list, repr=False)  # not persisted


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    if total_steps < 2:
        return 0
    return min(max(1, math.ceil(warmup_fraction * total_steps)), total_steps - 1)


def lr_at(step: int, total_steps: int, cfg: TrainConfig):
    """(backbone lr, head lr): linear warm-up from 0 to the maxima, then linear decay to 0."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = warmup_steps(total_steps, cfg.warmup_fraction)
    if step < warm:
        scale = step / warm
    else:
        scale = (total_steps - step) / (total_steps - warm)
    return cfg.max_lr_backbone * scale, cfg.max_lr_head * scale


def build_variant(flags: AblationFlags, model_cfg: Optional[ModelConfig] = None, seed: int = 0) -> GCPANet:
    """Model for an ablation flag set; parameters are drawn from ``seed``."""
    flags.validate()
    cfg = copy.deepcopy(model_cfg) if model_cfg else ModelConfig()
    cfg.flags = copy.deepcopy(flags)
    torch.manual_seed(seed)
    return GCPANet(cfg)


def _is_norm_param(model: nn.Module, name: str) -> bool:
    module_name = name.rsplit(".", 1)[0]
    return isinstance(model.get_submodule(module_name), nn.modules.batchnorm._BatchNorm)


def param_groups(model: GCPANet, cfg: TrainConfig) -> List[dict]:
    """Backbone/head split (separate max lrs) x decay/no-decay split (normalization exempt)."""
    groups = {}
    for name, p in model.named_parameters():
        part = "backbone" if name.startswith("encoder.") else "head"
        decay = not _is_norm_param(model, name)
        key = (part, decay)
        if key not in groups:
            groups[key] = {"params": [], "names": [], "part": part,
                           "weight_decay": cfg.weight_decay if decay else 0.0, "lr": 0.0}
        groups[key]["params"].append(p)
        groups[key]["names"].append(name)
    return [groups[k] for k in sorted(groups)]


def make_optimizer(model: GCPANet, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(param_groups(model, cfg), lr=0.0, momentum=cfg.momentum)


def optimizer_buffers(opt: torch.optim.SGD) -> Dict[str, torch.Tensor]:
    out = {}
    for group in opt.param_groups:
        for name, p in zip(group["names"], group["params"]):
            buf = opt.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                out[name] = buf.detach().clone()
    return out


def restore_optimizer(opt: torch.optim.SGD, buffers: Dict[str, torch.Tensor]) -> None:
    for group in opt.param_groups:
        for name, p in zip(group["names"], group["params"]):
            if name in buffers:
                opt.state[p]["momentum_buffer"] = buffers[name].clone()


def snapshot(model: GCPANet, opt, step: int, cfg: TrainConfig, history=None, meta=None) -> Checkpoint:
    params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    config = {"train": cfg.to_dict(), "model": model.cfg.to_dict(), **(meta or {})}
    return Checkpoint(params, optimizer_buffers(opt) if opt else {}, step, config, list(history or []))


def apply_checkpoint(model: GCPANet, ckpt: Checkpoint) -> None:
    """Load ``ckpt.params`` into ``model``, naming every missing, unexpected or mis-shaped tensor."""
    own = model.state_dict()
    missing = sorted(set(own) - set(ckpt.params))
    unexpected = sorted(set(ckpt.params) - set(own))
    mis_shaped = sorted(k for k in set(own) & set(ckpt.params) if own[k].shape != ckpt.params[k].shape)
    if missing or unexpected or mis_shaped:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if unexpected:
            parts.append("unexpected: " + ", ".join(unexpected))
        if mis_shaped:
            parts.append("shape mismatch: " + ", ".join(mis_shaped))
        raise CheckpointError("checkpoint does not match model (" + "; ".join(parts) + ")")
    model.load_state_dict(ckpt.params)


def model_from_checkpoint(ckpt: Checkpoint) -> GCPANet:
    m = ckpt.config_snapshot["model"]
    cfg = ModelConfig(backbone=BackboneConfig(**{**m["backbone"], "pretrained_weights_path": None}),
                      width=m["width"], reduction=m["reduction"], flags=AblationFlags(**m["flags"]))
    model = GCPANet(cfg)
    apply_checkpoint(model, ckpt)
    return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write (temp file then rename)."""
    path = Path(path)
    tensors = {f"model/{k}": v.contiguous() for k, v in ckpt.params.items()}
    tensors.update({f"optim/{k}": v.contiguous() for k, v in ckpt.optimizer_state.items()})
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "step": str(ckpt.step),
            "config": json.dumps(ckpt.config_snapshot, sort_keys=True)}
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        save_file(tensors, tmp, metadata=meta)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a gcpanet checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')!r} unsupported "
                              f"(expected {CHECKPOINT_VERSION})")
    params = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    optim = {k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")}
    return Checkpoint(params, optim, int(meta["step"]), json.loads(meta["config"]))


def write_log(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_log(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def train(model: GCPANet, dataset: DatasetIndex, cfg: TrainConfig, output_dir=None,
          resume: Optional[Checkpoint] = None, max_steps: Optional[int] = None,
          meta: Optional[dict] = None) -> Checkpoint:
    """Run ``cfg.epochs`` epochs of mini-batch SGD and return the final checkpoint.

    With ``output_dir`` the loss log (``loss_log.csv``) and ``checkpoint.safetensors``
    are written there. ``resume`` continues from a saved checkpoint; ``max_steps``
    stops early (the schedule still spans the full run). ``meta`` is merged into
    the checkpoint's config snapshot.
    """
    if dataset.split != "train":
        raise TrainingError(f"dataset {dataset.name!r} is a {dataset.split} split, expected train")
    loss_cfg = LossConfig(tuple(cfg.lambdas))
    opt = make_optimizer(model, cfg)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    stop = total_steps if max_steps is None else min(total_steps, max_steps)

    start, history = 0, []
    if resume is not None:
        apply_checkpoint(model, resume)
        restore_optimizer(opt, resume.optimizer_state)
        start = resume.step
        history = [r for r in resume.log if r["step"] < start]
    out_dir = Path(output_dir) if output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume is not None and not history and (out_dir / "loss_log.csv").exists():
            history = [r for r in read_log(out_dir / "loss_log.csv") if r["step"] < start]

    step = start
    model.train()
    for epoch in range(start // steps_per_epoch, cfg.epochs):
        if step >= stop:
            break
        skip = step - epoch * steps_per_epoch
        stream = batches(dataset, cfg.batch_size, cfg.seed, epoch, augment=cfg.augment,
                         resize=cfg.resize, crop=cfg.crop, start_batch=skip)
        for images, masks, _ in stream:
            if step >= stop:
                break
            lr_b, lr_h = lr_at(step, total_steps, cfg)
            for group in opt.param_groups:
                group["lr"] = lr_b if group["part"] == "backbone" else lr_h
            losses = compute_losses(model(images), masks, loss_cfg)
            if not torch.isfinite(losses["total"]):
                raise TrainingError(f"non-finite loss at step {step}: {losses['total'].item()}")
            opt.zero_grad(set_to_none=True)
            losses["total"].backward()
            opt.step()
            history.append({"step": step, "lr_backbone": lr_b, "lr_head": lr_h,
                            "loss_dom": losses["dom"].item(),
                            **{f"loss_aux{i}": losses[f"aux{i}"].item() for i in (1, 2, 3)},
                            "loss_total": losses["total"].item()})
            step += 1
            if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(snapshot(model, opt, step, cfg, meta=meta), out_dir / "checkpoint.safetensors")
                write_log(history, out_dir / "loss_log.csv")
            if step % 50 == 0:
                log.info("step %d/%d loss %.4f", step, total_steps, history[-1]["loss_total"])

    ckpt = snapshot(model, opt, step, cfg, history, meta)
    if out_dir:
        save_checkpoint(ckpt, out_dir / "checkpoint.safetensors")
        write_log(history, out_dir / "loss_log.csv")
    return ckpt

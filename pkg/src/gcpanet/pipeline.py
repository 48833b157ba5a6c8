"""Dataset-level prediction and the ablation harness."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .config import RunConfig, Variant
from .data import DatasetIndex, load_dataset, preprocess_eval, read_mask
from .metrics import MetricsReport, evaluate_pairs
from .network import AblationFlags, GCPANet, predict
from .trainer import build_variant, train

log = logging.getLogger(__name__)


class AblationError(RuntimeError):
    pass


def predict_index(model: GCPANet, index: DatasetIndex, size: int, batch_size: int = 8):
    """Yield ``(sample, prob)`` with ``prob`` a float map at the sample's original size.

    Probabilities are quantized to 8-bit levels, as they would be when written to PNG.
    """
    samples = index.samples
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.stack([preprocess_eval(s, size) for s in chunk])
        probs = predict(model, images)
        for sample, prob in zip(chunk, probs):
            prob = torch.nn.functional.interpolate(prob[None], size=sample.original_size, mode="bilinear",
                                                   align_corners=False)[0, 0]
            yield sample, torch.round(prob.clamp(0, 1) * 255).numpy() / 255.0


def evaluate_model(model: GCPANet, index: DatasetIndex, size: int) -> MetricsReport:
    preds, gts, names = [], [], []
    for sample, prob in predict_index(model, index, size):
        preds.append(prob)
        gts.append(np.asarray(read_mask(sample.mask_path)) >= 128)
        names.append(sample.stem)
    return evaluate_pairs(preds, gts, index.name, names)


@dataclass
class AblationRow:
    name: str
    flags: AblationFlags
    mae: Dict[str, float] = field(default_factory=dict)
    reports: Dict[str, MetricsReport] = field(default_factory=dict, repr=False)


def ablation_variants(cfg: RunConfig) -> List[Variant]:
    """Configured variants plus, when requested, the shared-GCF counterpart of the full model."""
    variants = list(cfg.ablation.variants)
    if cfg.ablation.shared_pair:
        full = AblationFlags()
        if not any(v.flags == full for v in variants):
            variants.append(Variant(name="GCF", flags=full))
        variants.append(Variant(name="shared GCF", flags=AblationFlags(gcf_shared=True)))
    return variants


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_").lower() or "variant"


def write_tables(rows: List[AblationRow], datasets: List[str], out_dir: Path) -> None:
    with open(out_dir / "ablation_table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "FIA", "SR", "HA", "GCF"] + [f"MAE_{d}" for d in datasets])
        for row in rows:
            if row.flags.gcf_shared:
                continue
            f = row.flags
            writer.writerow([row.name] + [int(x) for x in (f.use_fia, f.use_sr, f.use_ha, f.use_gcf)]
                            + [f"{row.mae[d]:.4f}" for d in datasets if d in row.mae])
    pair = [r for r in rows if r.flags == AblationFlags()] + [r for r in rows if r.flags.gcf_shared]
    with open(out_dir / "gcf_vs_shared.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting"] + [f"MAE_{d}" for d in datasets])
        for row in pair:
            label = "shared GCF" if row.flags.gcf_shared else "per-stage GCF"
            writer.writerow([label] + [f"{row.mae[d]:.4f}" for d in datasets if d in row.mae])


def format_table(rows: List[AblationRow], datasets: List[str]) -> str:
    head = f"{'variant':<14}{'FIA':>4}{'SR':>4}{'HA':>4}{'GCF':>4}" + "".join(f"{d:>14}" for d in datasets)
    lines = [head]
    for row in rows:
        f = row.flags
        marks = "".join(f"{'x' if on else '':>4}" for on in (f.use_fia, f.use_sr, f.use_ha, f.use_gcf))
        lines.append(f"{row.name:<14}{marks}" + "".join(f"{row.mae.get(d, float('nan')):>14.4f}" for d in datasets))
    return "\n".join(lines)


def run_ablation(cfg: RunConfig, output_dir, variants: Optional[List[Variant]] = None) -> List[AblationRow]:
    """Train and evaluate every variant under the same seed and schedule.

    Models are scored on the training set (the overfit set at desk scale) and
    on each ``data.test`` set. Tables are rewritten after every variant, so a
    failure leaves the finished rows on disk.
    """
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = cfg.data_root()
    train_index = load_dataset(root, cfg.data.train, "train")
    eval_sets = [train_index] + [load_dataset(root, name, "test") for name in cfg.data.test]
    datasets = [d.name for d in eval_sets]

    rows: List[AblationRow] = []
    for variant in variants or ablation_variants(cfg):
        train_cfg = copy.deepcopy(cfg.train)
        train_cfg.ablation_flags = copy.deepcopy(variant.flags)
        try:
            model = build_variant(variant.flags, cfg.model_cfg(variant.flags), seed=train_cfg.seed)
            train(model, train_index, train_cfg, out_dir / _slug(variant.name))
            row = AblationRow(variant.name, variant.flags)
            for index in eval_sets:
                report = evaluate_model(model, index, cfg.data.eval_size)
                row.mae[index.name] = report.mae
                row.reports[index.name] = report
        except Exception as exc:
            write_tables(rows, datasets, out_dir)
            raise AblationError(f"variant {variant.name!r} failed: {exc}") from exc
        rows.append(row)
        log.info("variant %s: %s", variant.name, row.mae)
        write_tables(rows, datasets, out_dir)
    return rows

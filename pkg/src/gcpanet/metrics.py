"""Saliency metrics: PR curve, max F-measure, MAE and S-measure.

Predictions are float maps in [0, 1]; for the PR/F curves they are quantized
to 8-bit levels and binarized at ``pred >= t`` for t = 1..255. Dataset curves
average the per-image precision and recall at each threshold, and the
F-curve is computed from those averages.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

THRESHOLDS = np.arange(1, 256)
BETA2 = 0.3
ALPHA = 0.5
EPS = 1e-12


class MetricsError(ValueError):
    pass


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


@dataclass
class MetricsReport:
    dataset: str
    max_f: float
    s_measure: float
    mae: float
    pr: PRCurve
    f_curve: np.ndarray
    per_image: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "max_f": self.max_f,
            "s_measure": self.s_measure,
            "mae": self.mae,
            "thresholds": self.pr.thresholds.tolist(),
            "precision": self.pr.precision.tolist(),
            "recall": self.pr.recall.tolist(),
            "f_curve": self.f_curve.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        try:
            pr = PRCurve(np.asarray(d["thresholds"], dtype=int), np.asarray(d["precision"], dtype=float),
                         np.asarray(d["recall"], dtype=float))
            report = cls(str(d["dataset"]), float(d["max_f"]), float(d["s_measure"]), float(d["mae"]),
                         pr, np.asarray(d["f_curve"], dtype=float))
        except (KeyError, TypeError, ValueError) as exc:
            raise MetricsError(f"malformed report: {exc}") from exc
        n = len(THRESHOLDS)
        if not (len(pr.thresholds) == len(pr.precision) == len(pr.recall) == len(report.f_curve) == n):
            raise MetricsError(f"malformed report: curves must have {n} points")
        return report

    def save(self, path, per_image_csv: Optional[Path] = None) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        if self.per_image:
            csv_path = per_image_csv or path.with_suffix(".per_image.csv")
            with open(csv_path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(self.per_image[0]))
                writer.writeheader()
                writer.writerows(self.per_image)

    @classmethod
    def load(cls, path) -> "MetricsReport":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise MetricsError(f"cannot read report {path}: {exc}") from exc
        return cls.from_dict(data)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricsError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt.astype(bool)


def quantize(pred) -> np.ndarray:
    return np.round(np.clip(pred, 0, 1) * 255).astype(np.int64)


def image_pr(pred, gt):
    """Per-threshold (precision, recall) of one image; 255 points each."""
    pred, gt = _pair(pred, gt)
    levels = quantize(pred)
    # histogram of levels on fg/bg, reversed cumulative sum gives counts of pred >= t
    fg_hist = np.bincount(levels[gt], minlength=256)
    bg_hist = np.bincount(levels[~gt], minlength=256)
    tp = np.cumsum(fg_hist[::-1])[::-1][1:]
    fp = np.cumsum(bg_hist[::-1])[::-1][1:]
    n_pos = gt.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
        recall = tp / n_pos if n_pos > 0 else np.zeros_like(tp, dtype=float)
    return precision.astype(float), recall.astype(float)


def pr_points(preds: Sequence, gts: Sequence) -> PRCurve:
    if len(preds) == 0:
        raise MetricsError("empty input")
    if len(preds) != len(gts):
        raise MetricsError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    pairs = [image_pr(p, g) for p, g in zip(preds, gts)]
    precision = np.mean([p for p, _ in pairs], axis=0)
    recall = np.mean([r for _, r in pairs], axis=0)
    return PRCurve(THRESHOLDS.copy(), precision, recall)


def f_measure(precision, recall, beta2: float = BETA2):
    """F-beta; zero where the denominator vanishes. Works elementwise on arrays."""
    p = np.asarray(precision, dtype=float)
    r = np.asarray(recall, dtype=float)
    denom = beta2 * p + r
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(denom > 0, (1 + beta2) * p * r / np.where(denom > 0, denom, 1), 0.0)
    return float(f) if f.ndim == 0 else f


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _object_score(x: np.ndarray) -> float:
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mean / (mean ** 2 + 1.0 + std + EPS)


def _s_object(pred, gt) -> float:
    mu = gt.mean()
    fg = _object_score(pred[gt])
    bg = _object_score(1.0 - pred[~gt])
    return mu * fg + (1 - mu) * bg


def _centroid(gt):
    """1-based centroid (row, col) of the foreground, rounded half away from zero."""
    rows, cols = np.nonzero(gt)
    return int(np.floor(rows.mean() + 1 + 0.5)), int(np.floor(cols.mean() + 1 + 0.5))


def _ssim(pred, gt) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    a = 4 * x * y * sxy
    b = (x ** 2 + y ** 2) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _s_region(pred, gt) -> float:
    h, w = gt.shape
    cy, cx = _centroid(gt)
    g = gt.astype(float)
    score = 0.0
    for rs, cs in ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
                   (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))):
        block = pred[rs, cs]
        if block.size == 0:
            continue
        score += block.size / (h * w) * _ssim(block, g[rs, cs])
    return score


def s_measure(pred, gt, alpha: float = ALPHA) -> float:
    """Structure measure: alpha * object-aware + (1 - alpha) * region-aware similarity."""
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2:
        raise MetricsError(f"s_measure expects 2-D maps, got shape {pred.shape}")
    mu = gt.mean()
    if mu == 0:
        return float(1.0 - pred.mean())
    if mu == 1:
        return float(pred.mean())
    score = alpha * _s_object(pred, gt) + (1 - alpha) * _s_region(pred, gt)
    return float(min(max(score, 0.0), 1.0))


def load_map(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def _resize_to(pred: np.ndarray, shape) -> np.ndarray:
    if pred.shape == tuple(shape):
        return pred
    im = Image.fromarray(pred.astype(np.float32)).resize((shape[1], shape[0]), Image.BILINEAR)
    return np.clip(np.asarray(im, dtype=np.float64), 0, 1)


def _stems(directory: Path) -> dict:
    from .data import IMAGE_EXTS
    return {p.stem: p for p in sorted(Path(directory).iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def evaluate_pairs(preds, gts, dataset: str = "dataset", names=None) -> MetricsReport:
    names = names or [str(i) for i in range(len(preds))]
    pr = pr_points(preds, gts)
    f_curve = f_measure(pr.precision, pr.recall)
    per_image = []
    for name, p, g in zip(names, preds, gts):
        ip, ir = image_pr(p, g)
        per_image.append({"name": name, "mae": mae(p, g), "s_measure": s_measure(p, g),
                          "max_f": float(np.max(f_measure(ip, ir)))})
    return MetricsReport(
        dataset=dataset,
        max_f=float(np.max(f_curve)),
        s_measure=float(np.mean([r["s_measure"] for r in per_image])),
        mae=float(np.mean([r["mae"] for r in per_image])),
        pr=pr,
        f_curve=f_curve,
        per_image=per_image,
    )


def evaluate(pred_dir, gt_dir, dataset: Optional[str] = None) -> MetricsReport:
    """Score every ground-truth mask in ``gt_dir`` against the same-stem map in ``pred_dir``."""
    gt_files = _stems(gt_dir)
    if not gt_files:
        raise MetricsError(f"no ground-truth maps in {gt_dir}")
    pred_files = _stems(pred_dir)
    missing = sorted(s for s in gt_files if s not in pred_files)
    if missing:
        raise MetricsError(f"no prediction for: {', '.join(missing)}")
    preds, gts = [], []
    for stem, gt_path in gt_files.items():
        raw = load_map(gt_path)
        gt = raw >= 128 / 255
        if not np.all((raw == 0) | (raw == 1)):
            log.warning("%s: ground truth is not binary; thresholded at 128", gt_path.name)
        preds.append(_resize_to(load_map(pred_files[stem]), gt.shape))
        gts.append(gt)
    return evaluate_pairs(preds, gts, dataset or Path(gt_dir).name, list(gt_files))

"""``gcpa`` command line: train, infer, eval, plot, ablate (and synth for desk-scale data).

Exit codes: 0 success, 1 partial failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import plotting
from .backbone import WeightsError
from .config import ConfigError, load_config, save_config
from .data import IMAGE_EXTS, DatasetError, DecodeError, Sample, load_dataset, preprocess_eval, read_image, save_prediction
from .metrics import MetricsError, MetricsReport, evaluate
from .network import predict
from .pipeline import AblationError, format_table, run_ablation
from .trainer import CheckpointError, TrainingError, build_variant, load_checkpoint, model_from_checkpoint, train

log = logging.getLogger("gcpa")

OK, PARTIAL, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_run_config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "output", None):
        cfg.output_dir = str(args.output)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(cfg.output_dir)
    root = cfg.data_root()
    if not (root / cfg.data.train).is_dir():
        raise UsageError(f"dataset not found: {root / cfg.data.train}")
    index = load_dataset(root, cfg.data.train, "train")

    resume = None
    ckpt_path = out_dir / "checkpoint.safetensors"
    if args.resume:
        if not ckpt_path.is_file():
            raise UsageError(f"--resume: no checkpoint at {ckpt_path}")
        resume = load_checkpoint(ckpt_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.yaml")

    model = build_variant(cfg.train.ablation_flags, cfg.model_cfg(), seed=cfg.train.seed)
    ckpt = train(model, index, cfg.train, out_dir, resume=resume,
                 meta={"data": {"eval_size": cfg.data.eval_size}})
    last = ckpt.log[-1]["loss_total"] if ckpt.log else float("nan")
    print(f"trained {ckpt.step} steps, final loss {last:.4f}; checkpoint: {ckpt_path}")
    return OK


def cmd_infer(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    model = model_from_checkpoint(ckpt)
    size = args.size or ckpt.config_snapshot.get("data", {}).get("eval_size", 320)
    in_dir, out_dir = Path(args.input), Path(args.output)
    if not in_dir.is_dir():
        raise UsageError(f"input directory not found: {in_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    written, failed = 0, 0
    for path in sorted(p for p in in_dir.iterdir() if p.is_file()):
        if path.suffix.lower() not in IMAGE_EXTS:
            log.warning("skipping non-image file %s", path.name)
            continue
        try:
            w, h = read_image(path).size
            sample = Sample(path, None, (h, w))
            prob = predict(model, preprocess_eval(sample, size)[None])[0]
            save_prediction(prob, out_dir / f"{path.stem}.png", sample.original_size)
            written += 1
        except DecodeError as exc:
            log.error("%s", exc)
            failed += 1
    print(f"wrote {written} maps to {out_dir}" + (f"; {failed} failed" if failed else ""))
    return PARTIAL if failed else OK


def print_summary(report: MetricsReport) -> None:
    print(f"{'dataset':<16}{'F_β':>8}{'S_m':>8}{'MAE':>8}")
    print(f"{report.dataset:<16}{report.max_f:>8.3f}{report.s_measure:>8.3f}{report.mae:>8.3f}")


def cmd_eval(args) -> int:
    for d in (args.pred, args.gt):
        if not Path(d).is_dir():
            raise UsageError(f"directory not found: {d}")
    try:
        report = evaluate(args.pred, args.gt, args.name)
    except MetricsError as exc:
        raise UsageError(str(exc)) from exc
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(report_path)
    print_summary(report)
    return OK


def cmd_plot(args) -> int:
    try:
        reports = [MetricsReport.load(p) for p in args.reports]
    except MetricsError as exc:
        raise UsageError(str(exc)) from exc
    if args.names and len(args.names) != len(reports):
        raise UsageError("--names must give one name per report")
    for path in plotting.plot_reports(reports, args.output, args.names, fmt=args.format):
        print(path)
    return OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    if cfg.model.backbone.kind != "tiny" and not args.full_scale:
        raise UsageError("ablation with a resnet50 backbone is a full-scale run; pass --full-scale")
    root = cfg.data_root()
    if not (root / cfg.data.train).is_dir():
        raise UsageError(f"dataset not found: {root / cfg.data.train}")
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.yaml")
    rows = run_ablation(cfg, out_dir)
    datasets = list(rows[0].mae) if rows else []
    print(format_table(rows, datasets))
    print(f"tables: {out_dir / 'ablation_table.csv'}, {out_dir / 'gcf_vs_shared.csv'}")
    return OK


def cmd_synth(args) -> int:
    from .synthetic import make_dataset
    base = make_dataset(args.output, args.name, n=args.count, size=args.size, seed=args.seed)
    print(base)
    return OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcpa", description="GCPANet salient object detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="override output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from <output>/checkpoint.safetensors")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write saliency maps for a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--size", type=int, help="network input size (default: from checkpoint, else 320)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="JSON report path (per-image CSV written beside it)")
    p.add_argument("--name", help="dataset name (default: gt directory name)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="PR and F-measure curves from one or more reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--output", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--format", default="png", choices=["png", "pdf", "svg"])
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="train and score the ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--output")
    p.add_argument("--seed", type=int)
    p.add_argument("--full-scale", action="store_true", help="allow resnet50 ablation runs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic image/mask dataset")
    p.add_argument("--output", required=True, help="dataset root")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, CheckpointError, WeightsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE
    except (TrainingError, AblationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return PARTIAL


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()

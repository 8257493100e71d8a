"""Command-line orchestration of the segmentation pipeline.

Subcommands: ``preprocess``, ``classify``, ``segment``, ``evaluate``,
``optimize``, ``report``. Global flags ``--config``, ``--seed`` and ``--jobs``
apply to all of them; ``FORESTSEG_LOG`` selects the logging level.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 pipeline
failure, 5 external-classifier failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

from . import cloudio, preprocess
from .cloudio import CloudFormatError
from .config import ConfigError, PipelineConfig, load_config
from .evaluate import EvaluationReport
from .instance import PipelineFailure, SegmentationParams, segment_instances
from .optimize import (AllTrialsFailedError, SpaceExhaustedError, importance_analysis,
                       load_trial_log, optimize, two_stage_optimize)
from .pipeline import evaluate_dataset, make_dataset_objective
from .semantic import ExternalClassifierError, classify

log = logging.getLogger("forestseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PIPELINE = 4
EXIT_EXTERNAL = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forestseg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", type=Path, help="pipeline configuration file")
    parser.add_argument("--seed", type=int, help="override the configured random seed")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for per-plot stages")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="tile, density-filter and voxel-downsample a cloud")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("classify", help="attach semantic labels via the configured classifier")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("segment", help="classify then segment single-tree instances")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("evaluate", help="match predictions against ground truth and report metrics")
    p.add_argument("--pred", type=Path, required=True, help="prediction file or directory")
    p.add_argument("--gt", type=Path, required=True, help="ground-truth file or directory")
    p.add_argument("--out", type=Path, required=True, help="directory for report files")

    p = sub.add_parser("optimize", help="tune segmentation hyperparameters on a labeled dataset")
    p.add_argument("--dataset", type=Path, required=True, help="directory of ground-truth plots")
    p.add_argument("--out", type=Path, required=True, help="directory for logs and results")

    p = sub.add_parser("report", help="summarize an optimization trial log")
    p.add_argument("--log", type=Path, required=True)
    return parser


def _read_plots(path: Path) -> dict:
    if path.is_dir():
        return cloudio.read_dataset(path)
    return {path.stem: cloudio.read_cloud(path)}


def cmd_preprocess(args, cfg: PipelineConfig) -> int:
    cloud = cloudio.read_cloud(args.input)
    pc = cfg.preprocess
    tiles = preprocess.tile_cloud(cloud, pc.tile_size)
    filtered = preprocess.filter_low_density_tiles(cloud, tiles, pc.min_tile_density)
    dropped = sum(1 for t in tiles if t.density < pc.min_tile_density)
    if len(filtered) == 0:
        raise PipelineFailure("filter_low_density_tiles",
                              f"empty output: all {len(tiles)} tiles fall below "
                              f"{pc.min_tile_density} pts/m^2")
    seed = cfg.classifier.seed
    thinned = preprocess.voxel_downsample(filtered, pc.subsampling_min_spacing, seed=seed)
    cloudio.write_cloud(thinned, args.output)
    print(f"preprocess: {len(cloud)} points in, {len(thinned)} out "
          f"({len(tiles)} tiles, {dropped} dropped, spacing {pc.subsampling_min_spacing} m)")
    return EXIT_OK


def cmd_classify(args, cfg: PipelineConfig) -> int:
    cloud = cloudio.read_cloud(args.input)
    labeled = classify(cloud, cfg.classifier)
    cloudio.write_cloud(labeled, args.output)
    print(f"classify: {len(labeled)} points labeled with {cfg.classifier.kind}")
    return EXIT_OK


def cmd_segment(args, cfg: PipelineConfig) -> int:
    cloud = cloudio.read_cloud(args.input)
    labeled = classify(cloud, cfg.classifier)
    segmented = segment_instances(labeled, cfg.segmentation)
    cloudio.write_cloud(segmented, args.output)
    n_instances = len(set(segmented.instance[segmented.instance >= 0].tolist()))
    print(f"segment: {n_instances} instances over {len(segmented)} points")
    return EXIT_OK


def _fmt(value: float) -> str:
    return "nan" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.4f}"


def render_report_text(report: EvaluationReport) -> str:
    lines = []
    for name, result in report.matches.items():
        lines.append(f"plot {name}")
        lines.append("  gt_id pred_id overlap gt_size pred_size precision recall f1 iou h_gt h_pred h_res")
        for r in result.records:
            pred = "-" if r.pred_id is None else str(r.pred_id)
            lines.append(f"  {r.gt_id} {pred} {r.overlap} {r.gt_size} {r.pred_size} "
                         f"{_fmt(r.precision)} {_fmt(r.recall)} {_fmt(r.f1)} {_fmt(r.iou)} "
                         f"{_fmt(r.h_gt)} {_fmt(r.h_pred)} {_fmt(r.h_res)}")
        agg = report.plots[name]
        lines.append(f"  plot aggregate: precision={_fmt(agg.precision)} recall={_fmt(agg.recall)} "
                     f"f1={_fmt(agg.f1)} iou={_fmt(agg.iou)} mean_residual={_fmt(agg.mean_residual)} "
                     f"rmse={_fmt(agg.rmse)} detection={_fmt(agg.detection_rate)} "
                     f"commission={_fmt(agg.commission_rate)} omission={_fmt(agg.omission_rate)}")
        lines.append("")
    d = report.dataset
    lines.append("dataset aggregate:")
    for key in ("precision", "recall", "f1", "iou", "mean_residual", "rmse",
                "detection_rate", "commission_rate", "omission_rate"):
        lines.append(f"  {key} = {_fmt(getattr(d, key))}")
    lines.append(f"  n_trees = {d.n_trees}")
    lines.append(f"  n_matched = {d.n_matched}")
    lines.append(f"  n_commission_preds = {d.n_commission_preds}")
    return "\n".join(lines) + "\n"


def render_report_csv(report: EvaluationReport) -> str:
    rows = ["plot,gt_id,pred_id,overlap,gt_size,pred_size,precision,recall,f1,iou,h_gt,h_pred,h_res"]
    for name, result in report.matches.items():
        for r in result.records:
            pred = "" if r.pred_id is None else str(r.pred_id)
            rows.append(f"{name},{r.gt_id},{pred},{r.overlap},{r.gt_size},{r.pred_size},"
                        f"{r.precision:.6f},{r.recall:.6f},{r.f1:.6f},{r.iou:.6f},"
                        f"{r.h_gt:.6f},{r.h_pred:.6f},{r.h_res:.6f}")
    return "\n".join(rows) + "\n"


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    if args.gt.is_dir() or args.pred.is_dir():
        gt = _read_plots(args.gt)
        pred = _read_plots(args.pred)
    else:  # two plain files form one plot pair regardless of their names
        gt = {args.gt.stem: cloudio.read_cloud(args.gt)}
        pred = {args.gt.stem: cloudio.read_cloud(args.pred)}
    report = evaluate_dataset(gt, pred, iou_threshold=cfg.evaluation.iou_threshold,
                              tolerance=cfg.evaluation.tolerance, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.txt").write_text(render_report_text(report))
    (args.out / "report.csv").write_text(render_report_csv(report))
    d = report.dataset
    print(f"evaluate: f1={_fmt(d.f1)} iou={_fmt(d.iou)} detection={_fmt(d.detection_rate)} "
          f"({d.n_trees} trees over {len(report.plots)} plots) -> {args.out}")
    return EXIT_OK


def _write_best_params(path: Path, params: dict) -> None:
    lines = [f"segmentation.{name} = {value}" for name, value in sorted(params.items())]
    path.write_text("\n".join(lines) + "\n")


def _render_importance(report) -> str:
    lines = ["parameter importance correlation"]
    for name, imp, corr in report.ranked():
        lines.append(f"{name} {imp:.4f} {corr:.4f}")
    return "\n".join(lines) + "\n"


def cmd_optimize(args, cfg: PipelineConfig) -> int:
    gt = cloudio.read_dataset(args.dataset)
    args.out.mkdir(parents=True, exist_ok=True)
    opt = cfg.optimizer
    objective = make_dataset_objective(gt, cfg.classifier,
                                       iou_threshold=cfg.evaluation.iou_threshold,
                                       jobs=args.jobs)
    if opt.budget2 > 0:
        result = two_stage_optimize(objective, opt.space, opt.budget1, opt.budget2,
                                    seed=opt.seed, initial_design=opt.initial_design,
                                    n_candidates=opt.n_candidates, log_dir=args.out)
        history = result.stage1.history
        if result.selected:
            print(f"optimize: stage 2 tuned {', '.join(result.selected)}")
    else:
        single = optimize(objective, opt.space, opt.budget1, seed=opt.seed,
                          initial_design=opt.initial_design, n_candidates=opt.n_candidates,
                          log_path=args.out / "trials_stage1.jsonl")
        result = single
        history = single.history

    _write_best_params(args.out / "best_params.txt", result.best_params)
    try:
        importance = importance_analysis(opt.space, history, seed=opt.seed)
        (args.out / "importance.txt").write_text(_render_importance(importance))
    except ValueError as exc:
        (args.out / "importance.txt").write_text(f"unavailable: {exc}\n")

    n_failed = sum(1 for r in result.history if r.failed)
    print(f"optimize: best F1 {result.best_objective:.4f} after {len(result.history)} trials "
          f"({n_failed} failed) -> {args.out / 'best_params.txt'}")
    return EXIT_OK


def cmd_report(args, cfg: PipelineConfig) -> int:
    if not args.log.exists():
        raise CloudFormatError(f"trial log not found: {args.log}")
    records = load_trial_log(args.log)
    if not records:
        raise CloudFormatError(f"trial log is empty: {args.log}")

    print("trial objective best_so_far status")
    best = -math.inf
    for r in records:
        if r.failed:
            status = f"FAILED({r.failure_stage})"
            shown = "-"
        else:
            best = max(best, r.objective)
            status = "ok"
            shown = f"{r.objective:.4f}"
        best_str = "-" if best == -math.inf else f"{best:.4f}"
        print(f"{r.trial} {shown} {best_str} {status}")

    failures = [r for r in records if r.failed]
    if failures:
        print(f"\n{len(failures)} failed trials:")
        for r in failures:
            print(f"  trial {r.trial}: {r.failure_stage}")

    space = cfg.optimizer.space
    if all(len(r.normalized) == space.dim for r in records):
        try:
            importance = importance_analysis(space, records, seed=cfg.optimizer.seed)
            print("\n" + _render_importance(importance), end="")
        except ValueError:
            pass
    return EXIT_OK


_COMMANDS = {
    "preprocess": cmd_preprocess,
    "classify": cmd_classify,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "optimize": cmd_optimize,
    "report": cmd_report,
}


def main(argv=None) -> int:
    level = os.environ.get("FORESTSEG_LOG", "WARNING").upper()
    if level not in ("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        return _COMMANDS[args.command](args, cfg)
    except ExternalClassifierError as exc:
        print(f"external classifier error: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except PipelineFailure as exc:
        print(f"pipeline failure in stage {exc.stage}: {exc.message}", file=sys.stderr)
        return EXIT_PIPELINE
    except (CloudFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, AllTrialsFailedError, SpaceExhaustedError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

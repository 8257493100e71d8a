"""Composition of the classify / segment / evaluate stages over a dataset.

The dataset-level F1 produced here is the objective the hyperparameter
optimizer maximizes: every plot is classified, segmented with the trial's
parameters and matched against its ground truth, per-tree F1 is averaged per
plot and the plot means are averaged over the dataset.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

from .core import LabeledCloud
from .evaluate import EvaluationReport, evaluate_plots
from .instance import PipelineFailure, SegmentationParams, segment_instances
from .semantic import ClassifierSpec, classify

log = logging.getLogger(__name__)


def segment_dataset(plots: dict[str, LabeledCloud], params: SegmentationParams,
                    spec: ClassifierSpec, jobs: int = 1) -> dict[str, LabeledCloud]:
    """Classify and segment every plot; a failure on any plot aborts the
    dataset with that plot's PipelineFailure."""

    def one(item):
        name, cloud = item
        try:
            return name, segment_instances(classify(cloud, spec), params)
        except PipelineFailure as exc:
            raise PipelineFailure(exc.stage, f"plot {name}: {exc.message}") from exc

    items = sorted(plots.items())
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return dict(pool.map(one, items))
    return dict(map(one, items))


def evaluate_dataset(gt_plots: dict[str, LabeledCloud],
                     pred_plots: dict[str, LabeledCloud],
                     iou_threshold: float = 0.5, tolerance: float | None = None,
                     jobs: int = 1) -> EvaluationReport:
    missing = sorted(set(gt_plots) - set(pred_plots))
    if missing:
        raise ValueError(f"predictions missing for plots: {missing}")
    pairs = {name: (gt_plots[name], pred_plots[name]) for name in gt_plots}
    return evaluate_plots(pairs, iou_threshold=iou_threshold, tolerance=tolerance, jobs=jobs)


def make_dataset_objective(gt_plots: dict[str, LabeledCloud], spec: ClassifierSpec,
                           iou_threshold: float = 0.5, jobs: int = 1):
    """Objective for the optimizer: params dict -> dataset F1.

    Segmentation failures propagate as PipelineFailure so the optimizer can
    log the trial as failed instead of crashing."""

    def objective(params: dict) -> float:
        seg_params = SegmentationParams.from_dict(params)
        predictions = segment_dataset(gt_plots, seg_params, spec, jobs=jobs)
        report = evaluate_dataset(gt_plots, predictions, iou_threshold=iou_threshold, jobs=jobs)
        log.debug("objective: F1=%.4f for %s", report.dataset.f1, params)
        return report.dataset.f1

    return objective

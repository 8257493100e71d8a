"""Evaluation protocol: point matching, greedy tree matching, metrics.

Predictions are compared against ground truth in three layers: a KNN label
transfer when the two clouds do not share an index space, a greedy
biggest-tree-first matching that consumes each predicted instance at most
once, and per-tree precision/recall/F1/IoU plus height residuals aggregated
as unweighted means per plot and then per dataset.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import spatial

from .core import UNASSIGNED, LabeledCloud


@dataclass(frozen=True)
class ConfusionCounts:
    """Point- or tree-level confusion triple."""

    tp: int
    fp: int
    fn: int
    level: str = "point"

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")


def point_metrics(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """(precision, recall, F1, IoU) with every 0/0 defined as 0."""
    tp, fp, fn = c.tp, c.fp, c.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    return precision, recall, f1, iou


@dataclass(frozen=True)
class PointMatch:
    """Per-ground-truth-point labels transferred from the nearest prediction.

    ``instance`` is UNASSIGNED and ``matched`` False where no predicted point
    lies within tolerance; ``semantic`` is None when the prediction carries no
    semantic labels."""

    instance: np.ndarray
    semantic: np.ndarray | None
    matched: np.ndarray
    distance: np.ndarray

    def to_cloud(self, gt: LabeledCloud) -> LabeledCloud:
        """Ground-truth geometry carrying the transferred instance labels."""
        return LabeledCloud(gt.xyz, semantic=gt.semantic, instance=self.instance,
                            height=gt.height)


def match_point_sets(pred: LabeledCloud, gt: LabeledCloud, tolerance: float) -> PointMatch:
    """Transfer labels from each gt point's nearest predicted point."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("match_point_sets requires non-empty clouds")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    tree = spatial.cKDTree(pred.xyz)
    dist, nearest = tree.query(gt.xyz)
    matched = dist <= tolerance

    instance = np.full(len(gt), UNASSIGNED, dtype=np.int64)
    if pred.instance is not None:
        instance[matched] = pred.instance[nearest[matched]]
    semantic = None
    if pred.semantic is not None:
        semantic = np.full(len(gt), -1, dtype=np.int64)
        semantic[matched] = pred.semantic[nearest[matched]]
    return PointMatch(instance=instance, semantic=semantic, matched=matched, distance=dist)


@dataclass(frozen=True)
class MatchRecord:
    """One ground-truth tree and the prediction assigned to it (if any)."""

    gt_id: int
    pred_id: int | None
    overlap: int
    gt_size: int
    pred_size: int
    precision: float
    recall: float
    f1: float
    iou: float
    h_gt: float
    h_pred: float = math.nan
    h_res: float = math.nan

    @property
    def is_omission(self) -> bool:
        return self.pred_id is None


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching output for one plot: records in assignment order plus
    the predicted instances that were never assigned (commissions)."""

    records: tuple[MatchRecord, ...]
    unassigned_pred_ids: tuple[int, ...] = ()

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def _instance_heights(values: np.ndarray, instance: np.ndarray) -> dict[int, float]:
    out: dict[int, float] = {}
    mask = instance != UNASSIGNED
    for inst in np.unique(instance[mask]):
        out[int(inst)] = float(values[instance == inst].max())
    return out


def greedy_tree_matching(gt: LabeledCloud, pred: LabeledCloud) -> MatchResult:
    """Iterative tree elimination over a shared index space.

    Ground-truth instances are visited by descending point count; each claims
    the not-yet-eliminated predicted instance with maximal point overlap
    (ties to the lower predicted id) and removes it from the pool. Zero
    overlap leaves the ground-truth tree an omission."""
    if len(gt) != len(pred):
        raise ValueError("greedy_tree_matching needs clouds over the same index space "
                         "(run match_point_sets first)")
    if gt.instance is None or pred.instance is None:
        raise ValueError("both clouds must carry instance labels")

    g = gt.instance
    p = pred.instance
    heights = gt.height if gt.height is not None else gt.xyz[:, 2]

    gt_ids, gt_sizes = np.unique(g[g != UNASSIGNED], return_counts=True)
    pred_ids, pred_sizes = np.unique(p[p != UNASSIGNED], return_counts=True)
    gt_size = dict(zip(gt_ids.tolist(), gt_sizes.tolist()))
    pred_size = dict(zip(pred_ids.tolist(), pred_sizes.tolist()))

    overlaps: dict[int, dict[int, int]] = {int(i): {} for i in gt_ids}
    both = (g != UNASSIGNED) & (p != UNASSIGNED)
    if both.any():
        pair_keys = g[both].astype(np.int64) * (int(p.max()) + 1) + p[both]
        uniq, counts = np.unique(pair_keys, return_counts=True)
        base = int(p.max()) + 1
        for key, count in zip(uniq.tolist(), counts.tolist()):
            overlaps[key // base][key % base] = count

    h_gt = _instance_heights(heights, g)
    h_pred = _instance_heights(heights, p)

    order = sorted(gt_ids.tolist(), key=lambda i: (-gt_size[i], i))
    available = set(pred_ids.tolist())
    records = []
    for gid in order:
        cand = [(pid, n) for pid, n in overlaps[gid].items() if pid in available and n > 0]
        if not cand:
            records.append(MatchRecord(
                gt_id=gid, pred_id=None, overlap=0, gt_size=gt_size[gid], pred_size=0,
                precision=0.0, recall=0.0, f1=0.0, iou=0.0, h_gt=h_gt[gid]))
            continue
        cand.sort(key=lambda t: (-t[1], t[0]))
        pid, n = cand[0]
        available.discard(pid)
        counts = ConfusionCounts(tp=n, fp=pred_size[pid] - n, fn=gt_size[gid] - n, level="tree")
        precision, recall, f1, iou = point_metrics(counts)
        records.append(MatchRecord(
            gt_id=gid, pred_id=pid, overlap=n, gt_size=gt_size[gid], pred_size=pred_size[pid],
            precision=precision, recall=recall, f1=f1, iou=iou,
            h_gt=h_gt[gid], h_pred=h_pred[pid], h_res=h_gt[gid] - h_pred[pid]))
    return MatchResult(records=tuple(records),
                       unassigned_pred_ids=tuple(sorted(available)))


def height_metrics(records) -> tuple[float, float]:
    """Mean residual and RMSE of gt-minus-predicted tree heights over the
    matched records."""
    residuals = [r.h_res for r in records if not r.is_omission]
    if not residuals:
        raise ValueError("height_metrics requires at least one matched record")
    res = np.asarray(residuals)
    return float(res.mean()), float(np.sqrt(np.mean(res ** 2)))


def detection_rates(result: MatchResult, iou_threshold: float = 0.5) -> tuple[float, float, float]:
    """(detection, commission, omission) rates.

    A matched pair with IoU >= threshold is a detection. A pair below the
    threshold counts as both a commission (the prediction) and an omission
    (the ground truth); never-assigned predictions are commissions and
    unmatched ground truth are omissions. Rates are normalized by the total
    of the three counts."""
    if not result.records:
        raise ValueError("detection_rates requires a non-empty record set")
    detections = commissions = omissions = 0
    for r in result.records:
        if r.is_omission:
            omissions += 1
        elif r.iou >= iou_threshold:
            detections += 1
        else:
            commissions += 1
            omissions += 1
    commissions += len(result.unassigned_pred_ids)
    total = detections + commissions + omissions
    if total == 0:
        return 0.0, 0.0, 0.0
    return detections / total, commissions / total, omissions / total


@dataclass(frozen=True)
class PlotAggregate:
    precision: float
    recall: float
    f1: float
    iou: float
    mean_residual: float  # NaN when the plot has no matched tree
    rmse: float
    detection_rate: float
    commission_rate: float
    omission_rate: float
    n_trees: int
    n_matched: int
    n_commission_preds: int


@dataclass(frozen=True)
class EvaluationReport:
    """Per-plot match records plus plot- and dataset-level aggregates."""

    matches: dict[str, MatchResult]
    plots: dict[str, PlotAggregate]
    dataset: PlotAggregate


def _aggregate_plot(result: MatchResult, iou_threshold: float) -> PlotAggregate:
    records = result.records
    det, com, omi = detection_rates(result, iou_threshold)
    matched = [r for r in records if not r.is_omission]
    if matched:
        mean_res, rmse = height_metrics(records)
    else:
        mean_res, rmse = math.nan, math.nan
    return PlotAggregate(
        precision=float(np.mean([r.precision for r in records])),
        recall=float(np.mean([r.recall for r in records])),
        f1=float(np.mean([r.f1 for r in records])),
        iou=float(np.mean([r.iou for r in records])),
        mean_residual=mean_res,
        rmse=rmse,
        detection_rate=det,
        commission_rate=com,
        omission_rate=omi,
        n_trees=len(records),
        n_matched=len(matched),
        n_commission_preds=len(result.unassigned_pred_ids),
    )


def aggregate_dataset(plot_matches: dict[str, MatchResult],
                      iou_threshold: float = 0.5) -> EvaluationReport:
    """Aggregate per-tree metrics to plot means, then plot means to dataset
    means (unweighted at both levels). Height metrics average over plots that
    have at least one matched tree."""
    if not plot_matches:
        raise ValueError("aggregate_dataset requires at least one plot")
    for name, result in plot_matches.items():
        if not result.records:
            raise ValueError(f"plot {name!r} has no ground-truth trees")

    plots = {name: _aggregate_plot(m, iou_threshold)
             for name, m in sorted(plot_matches.items())}
    values = list(plots.values())

    def mean_of(attr, skip_nan=False):
        vals = [getattr(v, attr) for v in values]
        if skip_nan:
            vals = [x for x in vals if not math.isnan(x)]
            if not vals:
                return math.nan
        return float(np.mean(vals))

    dataset = PlotAggregate(
        precision=mean_of("precision"),
        recall=mean_of("recall"),
        f1=mean_of("f1"),
        iou=mean_of("iou"),
        mean_residual=mean_of("mean_residual", skip_nan=True),
        rmse=mean_of("rmse", skip_nan=True),
        detection_rate=mean_of("detection_rate"),
        commission_rate=mean_of("commission_rate"),
        omission_rate=mean_of("omission_rate"),
        n_trees=sum(v.n_trees for v in values),
        n_matched=sum(v.n_matched for v in values),
        n_commission_preds=sum(v.n_commission_preds for v in values),
    )
    return EvaluationReport(matches=dict(sorted(plot_matches.items())),
                            plots=plots, dataset=dataset)


def evaluate_plots(pairs: dict[str, tuple[LabeledCloud, LabeledCloud]],
                   iou_threshold: float = 0.5, tolerance: float | None = None,
                   jobs: int = 1) -> EvaluationReport:
    """Match and aggregate a set of plots; (gt, pred) per plot name.

    When ``tolerance`` is given the prediction is first transferred onto the
    ground-truth index space with match_point_sets. Plots are independent, so
    ``jobs`` > 1 matches them in a thread pool; results are reduced in sorted
    plot order either way, making parallel and serial runs identical."""

    def one(item):
        name, (gt, pred) = item
        if tolerance is not None and (len(pred) != len(gt)
                                      or not np.array_equal(pred.xyz, gt.xyz)):
            pred = match_point_sets(pred, gt, tolerance).to_cloud(gt)
        return name, greedy_tree_matching(gt, pred)

    items = sorted(pairs.items())
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            matches = dict(pool.map(one, items))
    else:
        matches = dict(map(one, items))
    return aggregate_dataset(matches, iou_threshold)

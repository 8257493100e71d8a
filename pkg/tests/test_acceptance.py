"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the
per-criterion lines as they complete). Every tolerance and runtime budget is
pinned here; the synthetic-forest generator serves as the ground-truth oracle
for the end-to-end criteria.
"""

import subprocess
import sys
import textwrap
import time
from pathlib import Path

import numpy as np
import pytest

from forestseg import cloudio
from forestseg.cli import main as cli_main
from forestseg.core import UNASSIGNED, LabeledCloud
from forestseg.evaluate import (ConfusionCounts, aggregate_dataset, greedy_tree_matching,
                                height_metrics, point_metrics)
from forestseg.gp import KernelConfig, gp_fit, gp_predict, kernel_matrix
from forestseg.instance import PipelineFailure, SegmentationParams, segment_instances
from forestseg.optimize import (ParameterDomain, ParameterSpace, default_parameter_space,
                                importance_analysis, latin_hypercube, optimize,
                                two_stage_optimize, TrialRecord)
from forestseg.pipeline import make_dataset_objective
from forestseg.semantic import ClassifierSpec, classify
from forestseg.synthetic import generate_dataset, generate_plot


class Stopwatch:
    def __init__(self, budget_s):
        self.budget = budget_s
        self.start = time.perf_counter()

    def check(self):
        elapsed = time.perf_counter() - self.start
        assert elapsed < self.budget, f"runtime {elapsed:.1f}s exceeds budget {self.budget}s"
        return elapsed


def report(criterion, detail):
    print(f"[PASS] criterion {criterion}: {detail}")


def tab4_continuous_box():
    return ParameterSpace((
        ParameterDomain("slice_thickness", "continuous", 0.25, 0.75),
        ParameterDomain("find_stems_height", "continuous", 0.5, 2.0),
        ParameterDomain("find_stems_thickness", "continuous", 0.25, 0.75),
        ParameterDomain("find_stems_min_points", "continuous", 10.0, 200.0),
        ParameterDomain("graph_edge_length", "continuous", 0.2, 2.0),
        ParameterDomain("graph_maximum_cumulative_gap", "continuous", 1.0, 4.0),
        ParameterDomain("add_leaves_voxel_length", "continuous", 0.25, 0.75),
        ParameterDomain("add_leaves_edge_length", "continuous", 0.2, 2.0),
    ))


def brute_force_overlaps(gt, pred):
    """Loop-and-dict confusion oracle over instance label pairs."""
    overlap, gt_size, pred_size = {}, {}, {}
    for g, p in zip(gt.tolist(), pred.tolist()):
        if g >= 0:
            gt_size[g] = gt_size.get(g, 0) + 1
        if p >= 0:
            pred_size[p] = pred_size.get(p, 0) + 1
        if g >= 0 and p >= 0:
            overlap[(g, p)] = overlap.get((g, p), 0) + 1
    return overlap, gt_size, pred_size


def greedy_oracle(gt, pred):
    overlap, gt_size, pred_size = brute_force_overlaps(gt, pred)
    assignments = {}
    available = set(pred_size)
    for g in sorted(gt_size, key=lambda g: (-gt_size[g], g)):
        cands = [(p, overlap.get((g, p), 0)) for p in available if overlap.get((g, p), 0) > 0]
        if not cands:
            assignments[g] = None
            continue
        cands.sort(key=lambda t: (-t[1], t[0]))
        assignments[g] = cands[0][0]
        available.discard(cands[0][0])
    return assignments, overlap, gt_size, pred_size


def test_criterion_01_metric_oracle_equivalence():
    watch = Stopwatch(60)
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(50, 10_001))
        gt = rng.integers(-1, int(rng.integers(2, 12)), n)
        pred = rng.integers(-1, int(rng.integers(2, 12)), n)
        if not (gt >= 0).any():
            gt[0] = 0
        xyz = np.zeros((n, 3))
        result = greedy_tree_matching(LabeledCloud(xyz, instance=gt),
                                      LabeledCloud(xyz, instance=pred))
        assignments, overlap, gt_size, pred_size = greedy_oracle(gt, pred)
        assert {r.gt_id: r.pred_id for r in result.records} == assignments
        for r in result.records:
            assert r.gt_size == gt_size[r.gt_id]
            if r.pred_id is not None:
                exact = overlap[(r.gt_id, r.pred_id)]
                assert r.overlap == exact
                assert r.pred_size == pred_size[r.pred_id]
                counts = ConfusionCounts(exact, pred_size[r.pred_id] - exact,
                                         gt_size[r.gt_id] - exact, level="tree")
                p, rec, f1, iou = point_metrics(counts)
                assert abs(r.precision - p) <= 1e-12
                assert abs(r.recall - rec) <= 1e-12
                assert abs(r.f1 - f1) <= 1e-12
                assert abs(r.iou - iou) <= 1e-12
    elapsed = watch.check()
    report(1, f"200 random clouds match the brute-force oracle exactly ({elapsed:.1f}s)")


def test_criterion_02_rmse_and_antisymmetry():
    # rmse of residuals {3, 4}
    def record_with_residual(i, res):
        from forestseg.evaluate import MatchRecord
        return MatchRecord(gt_id=i, pred_id=i, overlap=10, gt_size=10, pred_size=10,
                           precision=1, recall=1, f1=1, iou=1,
                           h_gt=10.0, h_pred=10.0 - res, h_res=res)

    mean, rmse = height_metrics([record_with_residual(0, 3.0), record_with_residual(1, 4.0)])
    assert abs(rmse - 3.53553) <= 1e-5 + 1e-6
    assert abs(rmse - np.sqrt(12.5)) <= 1e-6

    # antisymmetry: swapping gt and pred roles negates the mean residual
    rng = np.random.default_rng(7)
    n = 600
    xyz = np.column_stack([rng.random(n) * 5, rng.random(n) * 5, rng.random(n) * 20])
    inst_a = np.repeat(np.arange(3), n // 3)
    inst_b = inst_a.copy()
    # each side misses a different set of treetops
    for tree in range(3):
        members = np.flatnonzero(inst_a == tree)
        tops = members[np.argsort(xyz[members, 2])][-int(rng.integers(5, 40)):]
        inst_b[tops] = UNASSIGNED
    a = LabeledCloud(xyz, instance=inst_a)
    b = LabeledCloud(xyz, instance=inst_b)
    mean_ab, _ = height_metrics(greedy_tree_matching(a, b).records)
    mean_ba, _ = height_metrics(greedy_tree_matching(b, a).records)
    assert abs(mean_ab + mean_ba) <= 1e-12
    report(2, f"RMSE({3, 4})={rmse:.5f}; mean residual antisymmetry holds")


def test_criterion_03_gp_correctness():
    watch = Stopwatch(60)
    rng = np.random.default_rng(3)
    # kernel PSD on 100 random sets
    for _ in range(100):
        x = rng.random((int(rng.integers(3, 51)), int(rng.integers(1, 6))))
        k = KernelConfig(signal_variance=float(rng.random() * 2 + 0.1),
                         length_scale=float(rng.random() * 0.9 + 0.05))
        assert np.linalg.eigvalsh(kernel_matrix(x, x, k)).min() >= -1e-8

    # noiseless interpolation within 1e-6 (five samples of f(x) = x)
    x = np.linspace(0, 1, 5)[:, None]
    y = x[:, 0].copy()
    model = gp_fit(x, y, KernelConfig(noise_variance=1e-10))
    mean, _ = gp_predict(model, x)
    assert np.max(np.abs(mean - y)) <= 1e-6

    # agreement with a dense direct-formula oracle on a 2-D grid
    x2 = rng.random((15, 2))
    y2 = np.cos(3 * x2[:, 0]) + x2[:, 1]
    k2 = KernelConfig(signal_variance=1.4, length_scale=0.3, noise_variance=1e-6)
    model2 = gp_fit(x2, y2, k2)
    g = np.linspace(0, 1, 8)
    grid = np.array([[a, b] for a in g for b in g])
    mean2, var2 = gp_predict(model2, grid)
    cov = kernel_matrix(x2, x2, k2) + np.eye(15) * k2.noise_variance
    k_star = kernel_matrix(grid, x2, k2)
    oracle_mean = k_star @ np.linalg.solve(cov, y2 - y2.mean()) + y2.mean()
    oracle_var = k2.signal_variance - np.sum(k_star * np.linalg.solve(cov, k_star.T).T, axis=1)
    assert np.max(np.abs(mean2 - oracle_mean)) <= 1e-8
    assert np.max(np.abs(var2 - np.maximum(oracle_var, 0))) <= 1e-8
    elapsed = watch.check()
    report(3, f"kernel PSD x100, interpolation <=1e-6, grid oracle <=1e-8 ({elapsed:.1f}s)")


def test_criterion_04_optimizer_efficacy():
    watch = Stopwatch(120)
    space = tab4_continuous_box()
    names = space.names
    lowers = np.array([d.lower for d in space.domains])
    ranges = np.array([d.upper - d.lower for d in space.domains])
    diagonal = np.linalg.norm(ranges)

    beats, close = 0, 0
    for seed in range(10):
        hidden = lowers + np.random.default_rng([seed, 99]).random(8) * ranges

        def objective(p):
            x = np.array([p[n] for n in names])
            return -float(np.sum((x - hidden) ** 2))

        result = optimize(objective, space, budget=30, seed=seed, initial_design=10)
        best_x = np.array([result.best_params[n] for n in names])
        close += np.linalg.norm(best_x - hidden) <= 0.05 * diagonal

        rs = np.random.default_rng([seed, 123])
        random_best = max(
            -float(np.sum((lowers + rs.random(8) * ranges - hidden) ** 2))
            for _ in range(30))
        beats += result.best_objective > random_best

    assert beats >= 8, f"beat random search in only {beats}/10 seeds"
    assert close >= 7, f"within 5% of the diagonal in only {close}/10 seeds"
    elapsed = watch.check()
    report(4, f"beat random {beats}/10, within 5% diagonal {close}/10 ({elapsed:.0f}s)")


def test_criterion_05_replay_determinism_and_monotone_best(tmp_path):
    plots = generate_dataset(2, 3, seed=5)
    objective = make_dataset_objective(plots, ClassifierSpec(kind="oracle"))
    logs = []
    for run in ("a", "b"):
        log = tmp_path / f"trials_{run}.jsonl"
        optimize(objective, default_parameter_space(), budget=12, seed=17,
                 initial_design=8, n_candidates=256, log_path=log)
        logs.append(log.read_bytes())
    assert logs[0] == logs[1], "replays with identical seed/config differ"

    best_so_far = []
    best = -np.inf
    for line in logs[0].decode().splitlines():
        import json
        rec = json.loads(line)
        if rec["objective"] is not None:
            best = max(best, rec["objective"])
        best_so_far.append(best)
    assert best_so_far == sorted(best_so_far), "best-so-far column must be non-decreasing"
    report(5, "bit-identical replay logs; best-so-far non-decreasing")


def test_criterion_06_two_stage_protocol():
    space = ParameterSpace(tuple(
        ParameterDomain(f"x{i}", "continuous", 0.0, 1.0) for i in range(8)))

    def separable(p):
        return -(p["x1"] - 0.3) ** 2 - (p["x5"] - 0.7) ** 2

    recovered = 0
    for seed in range(10):
        result = two_stage_optimize(separable, space, budget1=25, budget2=15,
                                    seed=seed, initial_design=10)
        assert result.best_objective >= result.stage1.best_objective
        if "x1" in result.selected and "x5" in result.selected:
            recovered += 1
    assert recovered >= 8, f"active parameters recovered in only {recovered}/10 seeds"
    report(6, f"stage-2 selection recovered both active parameters in {recovered}/10 seeds")


def test_criterion_07_importance_sanity():
    space = ParameterSpace(tuple(
        ParameterDomain(f"x{i}", "continuous", 0.0, 1.0) for i in range(8)))
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng([77, seed])
        sample = latin_hypercube(25, 8, rng)
        history = [TrialRecord(trial=i, params=space.denormalize(u), normalized=tuple(u),
                               objective=float(-u[0]))
                   for i, u in enumerate(sample)]
        rep = importance_analysis(space, history, seed=seed)
        if rep.ranked()[0][0] == "x0" and rep.correlation[0] <= -0.9:
            hits += 1
    assert hits >= 9, f"importance ranked the active parameter first in only {hits}/10 seeds"
    report(7, f"importance ranked x0 first with correlation <= -0.9 in {hits}/10 seeds")


def _dataset_scores(plots, spec, params):
    matches = {}
    for name, gt in sorted(plots.items()):
        pred = segment_instances(classify(gt, spec), params)
        matches[name] = greedy_tree_matching(gt, pred)
    return aggregate_dataset(matches).dataset


def test_criterion_08_end_to_end_synthetic_forest():
    watch = Stopwatch(300)
    # well-separated plots spanning the 5-30 tree range; spacing 6.5 m keeps
    # crown gaps over 2 m even at maximal jitter and crown radius
    plots = {f"plot_{n}": generate_plot(n, seed=100 + n, spacing=6.5)
             for n in (5, 12, 30)}
    params = SegmentationParams()

    clean = _dataset_scores(plots, ClassifierSpec(kind="oracle"), params)
    assert clean.detection_rate >= 0.9, f"clean detection {clean.detection_rate:.3f} < 0.9"
    assert clean.f1 >= 0.8, f"clean dataset F1 {clean.f1:.3f} < 0.8"

    noisy = _dataset_scores(
        plots, ClassifierSpec(kind="oracle_with_noise", noise_rate=0.2, seed=9), params)
    assert noisy.f1 < clean.f1, "F1 should degrade under semantic noise"
    assert noisy.detection_rate >= 0.7, f"noisy detection {noisy.detection_rate:.3f} < 0.7"
    elapsed = watch.check()
    report(8, f"clean det={clean.detection_rate:.2f} F1={clean.f1:.2f}; "
              f"noisy det={noisy.detection_rate:.2f} F1={noisy.f1:.2f} ({elapsed:.0f}s)")


def test_criterion_09_optimization_uplift():
    watch = Stopwatch(600)
    plots = generate_dataset(10, 5, seed=31)
    objective = make_dataset_objective(plots, ClassifierSpec(kind="oracle"), jobs=4)

    misset = SegmentationParams(add_leaves_voxel_length=0.75, add_leaves_edge_length=0.2)
    baseline = objective(misset.to_dict())

    result = optimize(objective, default_parameter_space(), budget=40, seed=0,
                      initial_design=10)
    uplift = result.best_objective - baseline
    assert uplift >= 0.03, f"uplift {uplift:.4f} < 0.03 (baseline {baseline:.4f})"
    elapsed = watch.check()
    report(9, f"dataset F1 {baseline:.3f} -> {result.best_objective:.3f} "
              f"(uplift {uplift:.3f}) in 40 trials ({elapsed:.0f}s)")


def test_criterion_10_failure_tolerance():
    space = default_parameter_space()
    cutoff = 100.0

    def objective(p):
        if p["find_stems_min_points"] > cutoff:
            raise PipelineFailure("find_stems", "no stem seeds found")
        return 1.0 - abs(p["find_stems_height"] - 1.0)

    result = optimize(objective, space, budget=25, seed=11, initial_design=10)
    failed = [r for r in result.history if r.failed]
    assert failed, "the failure region was never probed"
    assert all(r.failure_stage == "find_stems" for r in failed)
    assert result.best_params["find_stems_min_points"] <= cutoff
    assert len(result.history) == 25
    report(10, f"{len(failed)} failed trials logged; best is feasible "
               f"(min_points={result.best_params['find_stems_min_points']:.0f})")


def test_criterion_11_interchange_and_cli(tmp_path):
    # round-trip losslessness
    rng = np.random.default_rng(0)
    cloud = LabeledCloud(rng.random((100, 3)) * 30 - 10,
                         semantic=rng.integers(0, 4, 100),
                         instance=rng.integers(-1, 6, 100))
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    cloudio.write_cloud(cloud, p1)
    back = cloudio.read_cloud(p1)
    assert np.array_equal(back.xyz, np.round(cloud.xyz, 6))
    assert np.array_equal(back.semantic, cloud.semantic)
    assert np.array_equal(back.instance, cloud.instance)
    cloudio.write_cloud(back, p2)
    assert p1.read_bytes() == p2.read_bytes()

    # identity external classifier is bit-exact on labels
    script = tmp_path / "identity.py"
    script.write_text(textwrap.dedent("""
        import argparse, shutil
        p = argparse.ArgumentParser()
        p.add_argument("--input"); p.add_argument("--output")
        a = p.parse_args()
        shutil.copy(a.input, a.output)
    """))
    spec = ClassifierSpec(kind="external", external_command=f"{sys.executable} {script}")
    plot = generate_plot(3, seed=4)
    assert np.array_equal(classify(plot, spec).semantic, plot.semantic)

    # documented exit codes through the real entry point
    plot_path = tmp_path / "plot.txt"
    cloudio.write_cloud(plot, plot_path)

    def run(args):
        proc = subprocess.run([sys.executable, "-m", "forestseg", *args],
                              capture_output=True, text=True)
        return proc.returncode

    assert run(["segment", "--input", str(plot_path),
                "--output", str(tmp_path / "seg.txt")]) == 0
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("no.such.key = 1\n")
    assert run(["--config", str(bad_cfg), "segment", "--input", str(plot_path),
                "--output", str(tmp_path / "x.txt")]) == 2
    malformed = tmp_path / "malformed.txt"
    malformed.write_text("# forestseg v1 columns: x y z\n1 2 zebra\n")
    assert run(["segment", "--input", str(malformed),
                "--output", str(tmp_path / "x.txt")]) == 3
    no_stems = tmp_path / "nostems.txt"
    flat = LabeledCloud(rng.random((200, 3)) * 5, semantic=np.zeros(200, dtype=np.int64))
    cloudio.write_cloud(flat, no_stems)
    assert run(["segment", "--input", str(no_stems),
                "--output", str(tmp_path / "x.txt")]) == 4
    boom = tmp_path / "boom.py"
    boom.write_text("import sys; sys.exit(1)")
    ext_cfg = tmp_path / "ext.cfg"
    ext_cfg.write_text(f"classifier.kind = external\n"
                       f"classifier.external_command = {sys.executable} {boom}\n")
    assert run(["--config", str(ext_cfg), "classify", "--input", str(plot_path),
                "--output", str(tmp_path / "x.txt")]) == 5
    report(11, "interchange lossless; identity external exact; exit codes 0/2/3/4/5 verified")

"""Failure-tolerant Bayesian optimization of the segmentation F1-score.

A GP surrogate over the unit cube drives an expected-improvement search.
Mixed parameter types are handled by continuous relaxation: every parameter
is normalized to [0, 1], proposals are snapped back onto discrete candidate
grids. Trials that crash the segmentation pipeline stay in the history and
feed the surrogate a penalty slightly below the worst observed objective, so
the search learns to avoid the collapse region without poisoning the scale.
A two-stage protocol reruns the search over only the few most important
parameters, with importance read off the relevance (inverse squared ARD
length scale) of a refitted surrogate.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gp
from .instance import PipelineFailure

DEFAULT_INITIAL_DESIGN = 10
DEFAULT_CANDIDATES = 2048
FAILURE_PENALTY_MARGIN = 0.05
MAX_STAGE2_PARAMS = 3


class SpaceExhaustedError(RuntimeError):
    """Every distinct point of a fully discrete space has been evaluated."""


class AllTrialsFailedError(RuntimeError):
    """No trial produced an objective value."""


@dataclass(frozen=True)
class ParameterDomain:
    """One tunable parameter: either a continuous range or a sorted candidate
    grid."""

    name: str
    kind: str  # "continuous" | "discrete"
    lower: float = 0.0
    upper: float = 1.0
    candidates: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "continuous":
            if not (np.isfinite(self.lower) and np.isfinite(self.upper)) or self.lower >= self.upper:
                raise ValueError(f"{self.name}: bounds must be finite with lower < upper")
        elif self.kind == "discrete":
            if not self.candidates:
                raise ValueError(f"{self.name}: empty candidate list")
            if list(self.candidates) != sorted(self.candidates):
                raise ValueError(f"{self.name}: candidates must be sorted")
            object.__setattr__(self, "lower", float(self.candidates[0]))
            object.__setattr__(self, "upper", float(self.candidates[-1]))
        else:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")

    def normalize(self, value: float) -> float:
        if self.upper == self.lower:
            return 0.0
        return (value - self.lower) / (self.upper - self.lower)

    def denormalize(self, u: float) -> float:
        value = self.lower + u * (self.upper - self.lower)
        if self.kind == "discrete":
            cands = np.asarray(self.candidates)
            return float(cands[np.argmin(np.abs(cands - value))])
        return float(min(max(value, self.lower), self.upper))

    def contains(self, value: float) -> bool:
        if self.kind == "discrete":
            return any(np.isclose(value, c) for c in self.candidates)
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class ParameterSpace:
    domains: tuple[ParameterDomain, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains)

    @property
    def dim(self) -> int:
        return len(self.domains)

    def normalize(self, params: dict) -> np.ndarray:
        return np.array([d.normalize(params[d.name]) for d in self.domains])

    def denormalize(self, u: np.ndarray) -> dict:
        return {d.name: d.denormalize(float(v)) for d, v in zip(self.domains, u)}

    def snap(self, u: np.ndarray) -> np.ndarray:
        """Project normalized coordinates onto the admissible set."""
        return self.normalize(self.denormalize(u))

    def contains(self, params: dict) -> bool:
        return all(d.contains(params[d.name]) for d in self.domains)

    def n_distinct(self) -> float:
        """Number of distinct points; inf when any dimension is continuous."""
        total = 1.0
        for d in self.domains:
            if d.kind == "continuous":
                return np.inf
            total *= len(d.candidates)
        return total

    def subspace(self, names: Sequence[str]) -> "ParameterSpace":
        chosen = {n: d for d in self.domains for n in [d.name]}
        return ParameterSpace(tuple(chosen[n] for n in names))


def default_parameter_space() -> ParameterSpace:
    """The eight segmentation hyperparameters with their admissible values.

    Six carry discrete candidate grids; the two graph edge lengths are tuned
    over a continuous range."""
    return ParameterSpace((
        ParameterDomain("slice_thickness", "discrete", candidates=(0.25, 0.5, 0.75)),
        ParameterDomain("find_stems_height", "discrete", candidates=(0.5, 0.75, 1.0, 1.5, 2.0)),
        ParameterDomain("find_stems_thickness", "discrete", candidates=(0.25, 0.5, 0.75)),
        ParameterDomain("find_stems_min_points", "discrete",
                        candidates=(10.0, 20.0, 30.0, 50.0, 100.0, 150.0, 200.0)),
        ParameterDomain("graph_edge_length", "continuous", lower=0.2, upper=2.0),
        ParameterDomain("graph_maximum_cumulative_gap", "discrete", candidates=(1.0, 2.0, 3.0, 4.0)),
        ParameterDomain("add_leaves_voxel_length", "discrete", candidates=(0.25, 0.5, 0.75)),
        ParameterDomain("add_leaves_edge_length", "continuous", lower=0.2, upper=2.0),
    ))


@dataclass(frozen=True)
class TrialRecord:
    """One optimizer iteration; failures keep their slot in the history."""

    trial: int
    params: dict
    normalized: tuple[float, ...]
    objective: float | None
    failure_stage: str | None = None
    wall_time: float = 0.0

    @property
    def failed(self) -> bool:
        return self.objective is None

    def to_json(self) -> str:
        # wall_time stays out of the log so that replays with the same seed
        # and config produce bit-identical files
        return json.dumps({
            "trial": self.trial,
            "params": self.params,
            "normalized": list(self.normalized),
            "objective": self.objective,
            "failure_stage": self.failure_stage,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        raw = json.loads(line)
        return cls(trial=raw["trial"], params=raw["params"],
                   normalized=tuple(raw["normalized"]), objective=raw["objective"],
                   failure_stage=raw.get("failure_stage"), wall_time=raw.get("wall_time", 0.0))


def load_trial_log(path) -> list[TrialRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(TrialRecord.from_json(line))
    return records


def latin_hypercube(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """n stratified samples of the unit cube."""
    u = np.empty((n, dim))
    for j in range(dim):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return u


def _initial_design(space: ParameterSpace, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x10AD])
    return latin_hypercube(n, space.dim, rng)


def _evaluated_keys(space: ParameterSpace, history: Sequence[TrialRecord]) -> set:
    return {tuple(r.params[name] for name in space.names) for r in history}


def _params_key(space: ParameterSpace, params: dict) -> tuple:
    return tuple(params[name] for name in space.names)


def _surrogate_data(space: ParameterSpace, history: Sequence[TrialRecord]):
    """Inputs and targets fed to the GP; failures get the penalty objective."""
    x = np.array([r.normalized for r in history])
    successes = [r.objective for r in history if not r.failed]
    penalty = (min(successes) if successes else 0.0) - FAILURE_PENALTY_MARGIN
    y = np.array([penalty if r.failed else r.objective for r in history])
    return x, y


def fit_surrogate(space: ParameterSpace, history: Sequence[TrialRecord],
                  seed: int, ard: bool = False) -> gp.GPModel:
    x, y = _surrogate_data(space, history)
    kernel = gp.fit_kernel_config(x, y, seed=seed, ard=ard)
    return gp.gp_fit(x, y, kernel)


def _polish_by_mean_gradient(model: gp.GPModel, x0: np.ndarray,
                             steps: int = 15, step_size: float = 0.05) -> np.ndarray:
    """Project a short gradient ascent on the posterior mean into the cube;
    yields an exploitation candidate for the EI comparison."""
    x = x0.copy()
    for _ in range(steps):
        grad = gp.gp_mean_gradient(model, x)
        norm = np.linalg.norm(grad)
        if norm < 1e-12:
            break
        x = np.clip(x + step_size * grad / norm, 0.0, 1.0)
    return x


def suggest_next(space: ParameterSpace, model: gp.GPModel | None,
                 history: Sequence[TrialRecord], seed: int,
                 n_candidates: int = DEFAULT_CANDIDATES,
                 initial_design: int = DEFAULT_INITIAL_DESIGN) -> dict:
    """Parameter vector for the next trial.

    While the history is shorter than the initial design, returns the next
    Latin-hypercube design point; afterwards maximizes expected improvement
    over a fresh seeded candidate set plus one mean-gradient polish of the
    incumbent. Never re-proposes an exactly evaluated vector."""
    trial = len(history)
    evaluated = _evaluated_keys(space, history)
    if len(evaluated) >= space.n_distinct():
        raise SpaceExhaustedError(
            f"all {int(space.n_distinct())} distinct parameter vectors evaluated")

    if trial < initial_design:
        design = _initial_design(space, initial_design, seed)
        params = space.denormalize(design[trial])
        if _params_key(space, params) not in evaluated:
            return params
        # snapped design point collides with an earlier trial: fall through
        # to a deterministic replacement stream
        rng = np.random.default_rng([seed, trial, 0xF])
        for _ in range(10000):
            params = space.denormalize(rng.random(space.dim))
            if _params_key(space, params) not in evaluated:
                return params
        raise SpaceExhaustedError("could not find an unevaluated design point")

    if model is None:
        raise ValueError("a fitted surrogate is required once the initial design is spent")

    rng = np.random.default_rng([seed, trial])
    successes = [r.objective for r in history if not r.failed]
    best = max(successes) if successes else -FAILURE_PENALTY_MARGIN

    if successes:
        # split the budget between global coverage and local refinement of
        # the incumbent, plus one mean-gradient polish
        n_local = n_candidates // 4
        candidates = latin_hypercube(n_candidates - n_local, space.dim, rng)
        best_record = max((r for r in history if not r.failed), key=lambda r: r.objective)
        incumbent = np.asarray(best_record.normalized)
        local = np.clip(incumbent + rng.normal(0.0, 0.05, (n_local, space.dim)), 0.0, 1.0)
        candidates = np.vstack([candidates, local,
                                _polish_by_mean_gradient(model, incumbent)])
    else:
        candidates = latin_hypercube(n_candidates, space.dim, rng)

    snapped = np.array([space.snap(c) for c in candidates])
    params_list = [space.denormalize(s) for s in snapped]
    keys = [_params_key(space, p) for p in params_list]
    fresh = [i for i, key in enumerate(keys) if key not in evaluated]
    # drop duplicates introduced by snapping, keeping first occurrence
    seen = set()
    unique_fresh = []
    for i in fresh:
        if keys[i] not in seen:
            seen.add(keys[i])
            unique_fresh.append(i)
    if not unique_fresh:
        raise SpaceExhaustedError("no unevaluated candidate found")

    ei = gp.expected_improvement_batch(model, snapped[unique_fresh], best)
    return params_list[unique_fresh[int(np.argmax(ei))]]


@dataclass
class OptimizeResult:
    best_params: dict
    best_objective: float
    history: list[TrialRecord] = field(repr=False)


def optimize(objective: Callable[[dict], float], space: ParameterSpace, budget: int,
             seed: int, initial_design: int = DEFAULT_INITIAL_DESIGN,
             n_candidates: int = DEFAULT_CANDIDATES, log_path=None,
             resume: bool = True) -> OptimizeResult:
    """Sequential suggest-evaluate-record loop.

    The objective may raise :class:`PipelineFailure`; such trials are recorded
    as failures and steer the surrogate away. With ``log_path`` every trial is
    appended to a JSON-lines log as soon as it finishes, and an existing log
    is picked up so interrupted runs resume at the correct trial index."""
    if budget < initial_design:
        raise ValueError(f"budget {budget} is below the initial design size {initial_design}")

    history: list[TrialRecord] = []
    if log_path is not None and resume and Path(log_path).exists():
        history = load_trial_log(log_path)[:budget]

    log_fh = open(log_path, "a") if log_path is not None else None
    try:
        while len(history) < budget:
            trial = len(history)
            model = None
            if trial >= initial_design:
                # per-dimension length scales: parameters influence the
                # objective at wildly different magnitudes
                model = fit_surrogate(space, history, seed=_derive_seed(seed, trial, 1), ard=True)
            params = suggest_next(space, model, history, seed,
                                  n_candidates=n_candidates, initial_design=initial_design)
            start = time.perf_counter()
            value, stage = None, None
            try:
                value = float(objective(params))
            except PipelineFailure as exc:
                stage = exc.stage
            record = TrialRecord(
                trial=trial, params=params,
                normalized=tuple(float(v) for v in space.normalize(params)),
                objective=value, failure_stage=stage,
                wall_time=time.perf_counter() - start)
            history.append(record)
            if log_fh is not None:
                log_fh.write(record.to_json() + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()

    successes = [r for r in history if not r.failed]
    if not successes:
        raise AllTrialsFailedError(f"all {len(history)} trials failed")
    best = max(successes, key=lambda r: (r.objective, -r.trial))
    return OptimizeResult(best_params=best.params, best_objective=best.objective,
                          history=history)


def _derive_seed(seed: int, *salt: int) -> list[int]:
    return [seed, *salt]


@dataclass(frozen=True)
class ImportanceReport:
    """Per-parameter relevance (sums to one) and Pearson correlation with the
    objective, both computed over normalized coordinates."""

    names: tuple[str, ...]
    importance: tuple[float, ...]
    correlation: tuple[float, ...]

    def ranked(self) -> list[tuple[str, float, float]]:
        rows = list(zip(self.names, self.importance, self.correlation))
        rows.sort(key=lambda r: -r[1])
        return rows


def importance_analysis(space: ParameterSpace, history: Sequence[TrialRecord],
                        seed: int = 0) -> ImportanceReport:
    """Relevance-style importance from a per-dimension-length-scale refit.

    Importance is the normalized inverse squared length scale of an ARD
    surrogate fitted to the successful trials; correlation is the plain
    Pearson coefficient of each normalized parameter against the objective."""
    successes = [r for r in history if not r.failed]
    if len(successes) < 10:
        raise ValueError(f"importance analysis needs >= 10 successful trials, "
                         f"got {len(successes)}")
    x = np.array([r.normalized for r in successes])
    y = np.array([r.objective for r in successes])

    correlations = []
    for j in range(space.dim):
        col = x[:, j]
        if np.std(col) < 1e-12 or np.std(y) < 1e-12:
            correlations.append(0.0)
        else:
            correlations.append(float(np.corrcoef(col, y)[0, 1]))

    kernel = gp.fit_kernel_config(x, y, seed=_derive_seed(seed, 0xA4D), ard=True)
    relevance = 1.0 / kernel.length_scales ** 2
    importance = relevance / relevance.sum()
    return ImportanceReport(names=space.names,
                            importance=tuple(float(v) for v in importance),
                            correlation=tuple(correlations))


def select_important(report: ImportanceReport, max_params: int = MAX_STAGE2_PARAMS) -> tuple[str, ...]:
    """Parameters whose importance exceeds the uniform share, at most
    ``max_params``, at least one."""
    floor = 1.0 / len(report.names)
    ranked = report.ranked()
    chosen = [name for name, imp, _ in ranked if imp > floor][:max_params]
    if not chosen:
        chosen = [ranked[0][0]]
    return tuple(chosen)


@dataclass
class TwoStageResult:
    best_params: dict
    best_objective: float
    history: list[TrialRecord] = field(repr=False)
    selected: tuple[str, ...] = ()
    stage1: OptimizeResult | None = None
    stage2: OptimizeResult | None = None


def two_stage_optimize(objective: Callable[[dict], float], space: ParameterSpace,
                       budget1: int, budget2: int, seed: int,
                       initial_design: int = DEFAULT_INITIAL_DESIGN,
                       n_candidates: int = DEFAULT_CANDIDATES,
                       log_dir=None) -> TwoStageResult:
    """Broad optimization, then re-optimization of the most important
    parameters (at most three) with the rest frozen at the stage-1 best."""
    log1 = Path(log_dir) / "trials_stage1.jsonl" if log_dir is not None else None
    stage1 = optimize(objective, space, budget1, seed,
                      initial_design=initial_design, n_candidates=n_candidates,
                      log_path=log1)
    if budget2 <= 0:
        return TwoStageResult(best_params=stage1.best_params,
                              best_objective=stage1.best_objective,
                              history=list(stage1.history), stage1=stage1)

    report = importance_analysis(space, stage1.history, seed=seed)
    selected = select_important(report)
    frozen = {name: stage1.best_params[name] for name in space.names if name not in selected}
    reduced = space.subspace(selected)

    def reduced_objective(partial: dict) -> float:
        return objective({**frozen, **partial})

    log2 = Path(log_dir) / "trials_stage2.jsonl" if log_dir is not None else None
    stage2 = optimize(reduced_objective, reduced, budget2, seed=_derive_seed_int(seed),
                      initial_design=min(initial_design, budget2),
                      n_candidates=n_candidates, log_path=log2)

    combined = list(stage1.history)
    for r in stage2.history:
        full = {**frozen, **r.params}
        combined.append(TrialRecord(
            trial=len(combined), params=full,
            normalized=tuple(float(v) for v in space.normalize(full)),
            objective=r.objective, failure_stage=r.failure_stage,
            wall_time=r.wall_time))

    successes = [r for r in combined if not r.failed]
    best = max(successes, key=lambda r: (r.objective, -r.trial))
    return TwoStageResult(best_params=best.params, best_objective=best.objective,
                          history=combined, selected=selected,
                          stage1=stage1, stage2=stage2)


def _derive_seed_int(seed: int) -> int:
    # keep stage-2 seeding disjoint from stage 1 but reproducible
    return (seed * 2654435761 + 0x57A2) % (2 ** 31)

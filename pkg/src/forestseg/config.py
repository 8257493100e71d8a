"""Flat ``key = value`` configuration with dotted section prefixes.

Example::

    preprocess.tile_size = 1.0
    classifier.kind = oracle_with_noise
    classifier.noise_rate = 0.2
    segmentation.find_stems_height = 1.0
    evaluation.iou_threshold = 0.5
    optimizer.budget1 = 40
    optimizer.space.find_stems_min_points = 10 20 30 50 100 150 200
    optimizer.space.graph_edge_length = 0.2:2.0

Parsing is strict: unknown keys and malformed values are configuration
errors, raised before any data is touched. ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .instance import SegmentationParams
from .optimize import (DEFAULT_CANDIDATES, DEFAULT_INITIAL_DESIGN, ParameterDomain,
                       ParameterSpace, default_parameter_space)
from .preprocess import PreprocessConfig
from .semantic import ClassifierSpec


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass(frozen=True)
class EvaluationSettings:
    tolerance: float = 0.02  # 2 x default subsampling spacing
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ConfigError("evaluation.tolerance must be positive")
        if not (0.0 <= self.iou_threshold <= 1.0):
            raise ConfigError("evaluation.iou_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class OptimizerSettings:
    budget1: int = 40
    budget2: int = 10
    initial_design: int = DEFAULT_INITIAL_DESIGN
    n_candidates: int = DEFAULT_CANDIDATES
    seed: int = 0
    space: ParameterSpace = field(default_factory=default_parameter_space)

    def __post_init__(self):
        if self.budget1 < self.initial_design:
            raise ConfigError("optimizer.budget1 must be >= optimizer.initial_design")
        if self.budget2 < 0:
            raise ConfigError("optimizer.budget2 must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Propagate a CLI-level seed override."""
        return replace(self,
                       classifier=replace(self.classifier, seed=seed),
                       optimizer=replace(self.optimizer, seed=seed))


_FLOAT_KEYS = {
    "preprocess.tile_size", "preprocess.min_tile_density", "preprocess.subsampling_min_spacing",
    "classifier.noise_rate", "classifier.timeout",
    "segmentation.slice_thickness", "segmentation.find_stems_height",
    "segmentation.find_stems_thickness", "segmentation.graph_edge_length",
    "segmentation.graph_maximum_cumulative_gap", "segmentation.add_leaves_voxel_length",
    "segmentation.add_leaves_edge_length",
    "evaluation.tolerance", "evaluation.iou_threshold",
}
_INT_KEYS = {
    "preprocess.min_points_per_box", "preprocess.max_points_per_box",
    "classifier.seed",
    "segmentation.find_stems_min_points",
    "optimizer.budget1", "optimizer.budget2", "optimizer.initial_design",
    "optimizer.n_candidates", "optimizer.seed",
}
_STR_KEYS = {"classifier.kind", "classifier.external_command"}
_TRIPLE_KEYS = {"preprocess.sample_box_size_m", "preprocess.sample_box_overlap"}


def _parse_scalar(key: str, raw: str):
    try:
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _INT_KEYS:
            return int(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    if key in _TRIPLE_KEYS:
        parts = raw.split()
        if len(parts) != 3:
            raise ConfigError(f"{key} expects three values, got {raw!r}")
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _parse_domain(name: str, raw: str) -> ParameterDomain:
    raw = raw.strip()
    if ":" in raw:
        lo, _, hi = raw.partition(":")
        try:
            return ParameterDomain(name, "continuous", lower=float(lo), upper=float(hi))
        except ValueError as exc:
            raise ConfigError(f"bad range for optimizer.space.{name}: {raw!r} ({exc})") from None
    try:
        candidates = tuple(sorted(float(tok) for tok in raw.split()))
    except ValueError:
        raise ConfigError(f"bad candidate list for optimizer.space.{name}: {raw!r}") from None
    if not candidates:
        raise ConfigError(f"empty candidate list for optimizer.space.{name}")
    return ParameterDomain(name, "discrete", candidates=candidates)


def parse_config_text(text: str, source: str = "<config>") -> PipelineConfig:
    values: dict[str, object] = {}
    domains: dict[str, ParameterDomain] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw_line!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key.startswith("optimizer.space."):
            name = key[len("optimizer.space."):]
            valid = {d.name for d in default_parameter_space().domains}
            if name not in valid:
                raise ConfigError(f"{source}:{lineno}: unknown parameter {name!r} in optimizer.space")
            domains[name] = _parse_domain(name, raw_value)
            continue
        if key not in _FLOAT_KEYS | _INT_KEYS | _STR_KEYS | _TRIPLE_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_scalar(key, raw_value)

    def section(prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in values.items() if k.startswith(prefix + ".")}

    space = default_parameter_space()
    if domains:
        space = ParameterSpace(tuple(domains.get(d.name, d) for d in space.domains))

    try:
        return PipelineConfig(
            preprocess=PreprocessConfig(**section("preprocess")),
            classifier=ClassifierSpec(**section("classifier")),
            segmentation=SegmentationParams(**section("segmentation")),
            evaluation=EvaluationSettings(**section("evaluation")),
            optimizer=OptimizerSettings(space=space, **section("optimizer")),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))

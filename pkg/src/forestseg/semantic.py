"""Pluggable per-point semantic classification stage.

Two built-in classifiers cover desk-scale experiments: ``oracle`` copies the
ground-truth labels and ``oracle_with_noise`` corrupts a controlled fraction
of them, which is how downstream experiments probe the instance stage's
dependence on semantic quality. The ``external`` kind round-trips the cloud
through any executable speaking the interchange format, so a classifier
written in another language can slot into the pipeline.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cloudio
from .core import LabeledCloud

DEFAULT_TIMEOUT = 3600.0
N_CLASSES = 4


class ExternalClassifierError(RuntimeError):
    """External classifier process failed, timed out or returned bad data."""


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str = "oracle"  # oracle | oracle_with_noise | external
    noise_rate: float = 0.0
    external_command: str | None = None
    seed: int = 0
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if self.kind not in ("oracle", "oracle_with_noise", "external"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if not (0.0 <= self.noise_rate <= 1.0):
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.kind == "external" and not self.external_command:
            raise ValueError("external classifier requires external_command")


def classify(cloud: LabeledCloud, spec: ClassifierSpec) -> LabeledCloud:
    """Attach a semantic label to every point; never touches coordinates."""
    if spec.kind in ("oracle", "oracle_with_noise"):
        if cloud.semantic is None:
            raise ValueError("oracle classifier requires ground-truth semantic labels")
        if spec.kind == "oracle" or spec.noise_rate == 0.0:
            return cloud.with_semantic(cloud.semantic.copy())
        return cloud.with_semantic(_flip_labels(cloud.semantic, spec.noise_rate, spec.seed))
    return _run_external(cloud, spec)


def _flip_labels(semantic: np.ndarray, noise_rate: float, seed: int) -> np.ndarray:
    """Reassign each label, with probability noise_rate, to a uniformly random
    different class."""
    rng = np.random.default_rng(seed)
    flip = rng.random(len(semantic)) < noise_rate
    # offset in 1..3 cycles to one of the three other classes uniformly
    offsets = rng.integers(1, N_CLASSES, size=len(semantic))
    noisy = semantic.copy()
    noisy[flip] = (semantic[flip] + offsets[flip]) % N_CLASSES
    return noisy


def _run_external(cloud: LabeledCloud, spec: ClassifierSpec) -> LabeledCloud:
    with tempfile.TemporaryDirectory(prefix="forestseg-ext-") as tmp:
        in_path = Path(tmp) / "input.txt"
        out_path = Path(tmp) / "output.txt"
        cloudio.write_cloud(cloud, in_path)
        cmd = shlex.split(spec.external_command) + ["--input", str(in_path), "--output", str(out_path)]
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=spec.timeout)
        except subprocess.TimeoutExpired as exc:
            raise ExternalClassifierError(
                f"external classifier timed out after {spec.timeout} s") from exc
        except OSError as exc:
            raise ExternalClassifierError(f"cannot launch external classifier: {exc}") from exc
        if proc.returncode != 0:
            raise ExternalClassifierError(
                f"external classifier exited with status {proc.returncode}: "
                f"{proc.stderr.strip()[:500]}")
        if not out_path.exists():
            raise ExternalClassifierError("external classifier produced no output file")
        try:
            result = cloudio.read_cloud(out_path)
        except cloudio.CloudFormatError as exc:
            raise ExternalClassifierError(f"bad output from external classifier: {exc}") from exc
    if len(result) != len(cloud):
        raise ExternalClassifierError(
            f"external classifier changed the point count: {len(cloud)} in, {len(result)} out")
    if result.semantic is None:
        raise ExternalClassifierError("external classifier returned no semantic labels")
    # coordinates must survive the round trip at interchange precision
    rounded = np.round(cloud.xyz, cloudio.COORD_DECIMALS)
    if not np.allclose(result.xyz, rounded, atol=10.0 ** -cloudio.COORD_DECIMALS):
        raise ExternalClassifierError("external classifier moved point coordinates")
    return cloud.with_semantic(result.semantic)

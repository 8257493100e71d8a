"""Point-cloud data model and geometric primitives shared by all pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np
import numpy.typing as npt
from scipy import spatial

UNASSIGNED = -1  # sentinel instance id for points not belonging to any tree


class SemanticLabel(IntEnum):
    """Per-point semantic class."""

    TERRAIN = 0
    VEGETATION = 1
    CWD = 2
    STEM = 3


SEMANTIC_NAMES = {
    SemanticLabel.TERRAIN: "terrain",
    SemanticLabel.VEGETATION: "vegetation",
    SemanticLabel.CWD: "cwd",
    SemanticLabel.STEM: "stem",
}
SEMANTIC_CODES = {name: label for label, name in SEMANTIC_NAMES.items()}


@dataclass(frozen=True)
class LabeledCloud:
    """An ordered set of 3-D points with optional per-point labels.

    ``xyz`` is an (n, 3) float64 array. ``semantic`` holds SemanticLabel codes,
    ``instance`` holds tree ids with UNASSIGNED (-1) for unlabeled points, and
    ``height`` holds heights above ground once terrain normalization has run.
    Arrays are treated as immutable after construction.
    """

    xyz: npt.NDArray[np.float64]
    semantic: npt.NDArray[np.int64] | None = None
    instance: npt.NDArray[np.int64] | None = None
    height: npt.NDArray[np.float64] | None = field(default=None, compare=False)

    def __post_init__(self):
        xyz = np.ascontiguousarray(np.asarray(self.xyz, dtype=np.float64))
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must be an (n, 3) array, got shape {xyz.shape}")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "xyz", xyz)
        n = len(xyz)
        for name, dtype in (("semantic", np.int64), ("instance", np.int64), ("height", np.float64)):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.ascontiguousarray(np.asarray(arr, dtype=dtype))
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
            object.__setattr__(self, name, arr)
        if self.semantic is not None:
            bad = (self.semantic < 0) | (self.semantic > 3)
            if bad.any():
                raise ValueError(f"unknown semantic codes: {np.unique(self.semantic[bad])}")
        if self.instance is not None and (self.instance < UNASSIGNED).any():
            raise ValueError("instance ids must be >= -1")

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, indices) -> "LabeledCloud":
        """New cloud containing only the given point indices, labels included."""
        take = lambda a: None if a is None else a[indices]
        return LabeledCloud(self.xyz[indices], take(self.semantic), take(self.instance), take(self.height))

    def with_semantic(self, semantic) -> "LabeledCloud":
        return replace(self, semantic=semantic)

    def with_instance(self, instance) -> "LabeledCloud":
        return replace(self, instance=instance)

    def with_height(self, height) -> "LabeledCloud":
        return replace(self, height=height)


@dataclass(frozen=True)
class VoxelGrid:
    """Partition of a point set into cubic cells.

    cell = floor((p - origin) / spacing), componentwise. ``cells`` maps the
    integer cell triple to the member point indices; member lists are disjoint
    and their union is the full input index set.
    """

    origin: npt.NDArray[np.float64]
    spacing: float
    cells: dict[tuple[int, int, int], npt.NDArray[np.int64]]

    @property
    def n_occupied(self) -> int:
        return len(self.cells)


def voxel_keys(xyz: np.ndarray, origin, spacing: float) -> np.ndarray:
    """Integer cell triple per point, floor-quantized relative to ``origin``."""
    return np.floor((xyz - origin) / spacing).astype(np.int64)


def group_by_rows(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Group row vectors: returns (unique_rows, group_start, order).

    ``order`` sorts the input lexicographically by row; group i holds
    order[group_start[i]:group_start[i+1]] (last group runs to the end).
    """
    order = np.lexsort(keys.T[::-1])
    sorted_keys = keys[order]
    changed = np.ones(len(keys), dtype=bool)
    changed[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    start = np.flatnonzero(changed)
    return sorted_keys[start], start, order


def build_voxel_grid(cloud: LabeledCloud, spacing: float) -> VoxelGrid:
    """Quantize a cloud into cubic cells anchored at the cloud minimum."""
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    if len(cloud) == 0:
        raise ValueError("cannot voxelize an empty cloud")
    origin = cloud.xyz.min(axis=0)
    keys = voxel_keys(cloud.xyz, origin, spacing)
    uniq, start, order = group_by_rows(keys)
    bounds = np.append(start, len(keys))
    cells = {
        tuple(uniq[i]): np.sort(order[bounds[i]:bounds[i + 1]])
        for i in range(len(uniq))
    }
    return VoxelGrid(origin=origin, spacing=float(spacing), cells=cells)


class SpatialIndex:
    """k-nearest-neighbor index with deterministic tie-breaking.

    Queries return exactly min(k, n) indices ordered by non-decreasing
    Euclidean distance; exact distance ties are broken by the lower point
    index, which a raw kd-tree query does not guarantee.
    """

    def __init__(self, xyz: np.ndarray):
        xyz = np.asarray(xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError("index requires an (n, 3) coordinate array")
        if len(xyz) == 0:
            raise ValueError("cannot build an index over zero points")
        self.xyz = xyz
        self._tree = spatial.cKDTree(xyz)

    def __len__(self) -> int:
        return len(self.xyz)

    def query(self, point, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the k nearest points (ties by lower index)."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        point = np.asarray(point, dtype=np.float64)
        k_eff = min(k, len(self.xyz))
        dist, idx = self._tree.query(point, k=k_eff)
        dist = np.atleast_1d(np.asarray(dist, dtype=np.float64))
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        # re-rank every candidate within the worst returned distance so that
        # exact ties resolve by point index, independent of kd-tree internals
        radius = float(dist[-1]) * (1 + 1e-12)
        candidates = np.asarray(self._tree.query_ball_point(point, r=radius), dtype=np.int64)
        if len(candidates) < k_eff:  # degenerate, fall back to raw query order
            return idx, dist
        cdist = np.linalg.norm(self.xyz[candidates] - point, axis=1)
        order = np.lexsort((candidates, cdist))[:k_eff]
        return candidates[order], cdist[order]


def knn_query(index: SpatialIndex, point, k: int) -> list[tuple[int, float]]:
    """(point index, distance) pairs for the k nearest indexed points."""
    idx, dist = index.query(point, k)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]

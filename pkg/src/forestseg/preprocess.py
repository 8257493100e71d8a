"""Tiling, density filtering, voxel downsampling and box sampling.

These stages condition a raw plot cloud for the classifier: sparse border
tiles are discarded, the cloud is thinned to one point per voxel, and the
remainder is sliced into overlapping axis-aligned boxes shifted to the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LabeledCloud, group_by_rows

DEFAULT_TILE_SIZE = 1.0
DEFAULT_MIN_TILE_DENSITY = 50.0


@dataclass(frozen=True)
class Tile:
    """One horizontal grid cell: integer (ix, iy) index, member point indices
    into the source cloud, and point density per square meter."""

    ix: int
    iy: int
    indices: np.ndarray
    density: float


@dataclass(frozen=True)
class SampleBox:
    """Axis-aligned sample region with members shifted so the box minimum
    corner sits at the origin; ``offset`` undoes the shift.

    The unshifted coordinates are kept alongside: adding the offset back in
    floating point can differ from the source in the last ulp, and restoring
    must be exact."""

    extent: tuple[float, float, float]
    offset: np.ndarray
    xyz: np.ndarray
    indices: np.ndarray
    source_xyz: np.ndarray

    def restore(self) -> np.ndarray:
        """Member coordinates back in the source frame (bit-exact)."""
        return self.source_xyz


@dataclass(frozen=True)
class PreprocessConfig:
    tile_size: float = DEFAULT_TILE_SIZE
    min_tile_density: float = DEFAULT_MIN_TILE_DENSITY
    sample_box_size_m: tuple[float, float, float] = (6.0, 6.0, 8.0)
    sample_box_overlap: tuple[float, float, float] = (0.5, 0.5, 0.5)
    min_points_per_box: int = 1000
    max_points_per_box: int = 20000
    subsampling_min_spacing: float = 0.01

    def __post_init__(self):
        if self.tile_size <= 0:
            raise ValueError("tile_size must be positive")
        if self.min_tile_density < 0:
            raise ValueError("min_tile_density must be >= 0")
        if any(e <= 0 for e in self.sample_box_size_m):
            raise ValueError("sample box extents must be positive")
        if any(not (0 <= o < 1) for o in self.sample_box_overlap):
            raise ValueError("sample box overlaps must lie in [0, 1)")
        if self.min_points_per_box > self.max_points_per_box:
            raise ValueError("min_points_per_box must not exceed max_points_per_box")
        if self.subsampling_min_spacing <= 0:
            raise ValueError("subsampling_min_spacing must be positive")


def tile_cloud(cloud: LabeledCloud, tile_size: float) -> list[Tile]:
    """Assign every point to exactly one horizontal tile by floor quantization
    of (x, y) relative to the cloud minimum. Tiles come back ordered by cell
    index so downstream processing is schedule-independent."""
    if tile_size <= 0:
        raise ValueError(f"tile_size must be positive, got {tile_size}")
    if len(cloud) == 0:
        return []
    xy = cloud.xyz[:, :2]
    keys = np.floor((xy - xy.min(axis=0)) / tile_size).astype(np.int64)
    uniq, start, order = group_by_rows(keys)
    bounds = np.append(start, len(keys))
    area = tile_size * tile_size
    tiles = []
    for i in range(len(uniq)):
        members = np.sort(order[bounds[i]:bounds[i + 1]])
        tiles.append(Tile(int(uniq[i, 0]), int(uniq[i, 1]), members, len(members) / area))
    return tiles


def filter_low_density_tiles(cloud: LabeledCloud, tiles: list[Tile],
                             min_density: float) -> LabeledCloud:
    """Keep exactly the points of tiles whose density is >= min_density."""
    if min_density < 0:
        raise ValueError("min_density must be >= 0")
    kept = [t.indices for t in tiles if t.density >= min_density]
    if not kept:
        return cloud.subset(np.empty(0, dtype=np.int64))
    return cloud.subset(np.sort(np.concatenate(kept)))


def voxel_downsample(cloud: LabeledCloud, spacing: float, seed: int = 0) -> LabeledCloud:
    """Thin a cloud to one randomly chosen original point per occupied voxel.

    Cells are floor-quantized in world coordinates (not relative to the cloud
    minimum) so that downsampling an already-downsampled cloud at the same
    spacing is the identity. Deterministic given ``seed``.
    """
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.xyz / spacing).astype(np.int64)
    _, start, order = group_by_rows(keys)
    bounds = np.append(start, len(keys))
    rng = np.random.default_rng(seed)
    reps = np.empty(len(start), dtype=np.int64)
    for i in range(len(start)):
        members = order[bounds[i]:bounds[i + 1]]
        reps[i] = members[rng.integers(len(members))] if len(members) > 1 else members[0]
    return cloud.subset(np.sort(reps))


def sample_boxes(cloud: LabeledCloud, cfg: PreprocessConfig, seed: int = 0) -> list[SampleBox]:
    """Slice the cloud's bounding volume into overlapping boxes.

    Box origins step by extent * (1 - overlap) per axis starting at the cloud
    minimum. Boxes with fewer than ``min_points_per_box`` members are dropped;
    boxes over ``max_points_per_box`` are subsampled to the maximum
    (deterministic given ``seed``). Member points are shifted so each box's
    minimum corner is the origin.
    """
    if len(cloud) == 0:
        raise ValueError("cannot sample boxes from an empty cloud")
    extent = np.asarray(cfg.sample_box_size_m, dtype=np.float64)
    overlap = np.asarray(cfg.sample_box_overlap, dtype=np.float64)
    stride = extent * (1.0 - overlap)
    if np.any(stride <= 0):
        raise ValueError("degenerate stride: sample_box_overlap must be < 1")

    lo = cloud.xyz.min(axis=0)
    hi = cloud.xyz.max(axis=0)
    span = hi - lo
    counts = [max(1, int(np.ceil((span[a] - extent[a]) / stride[a])) + 1) for a in range(3)]

    rng = np.random.default_rng(seed)
    boxes = []
    for i in range(counts[0]):
        for j in range(counts[1]):
            for k in range(counts[2]):
                origin = lo + stride * (i, j, k)
                inside = np.all((cloud.xyz >= origin) & (cloud.xyz <= origin + extent), axis=1)
                members = np.flatnonzero(inside)
                if len(members) < cfg.min_points_per_box:
                    continue
                if len(members) > cfg.max_points_per_box:
                    pick = rng.choice(len(members), size=cfg.max_points_per_box, replace=False)
                    members = members[np.sort(pick)]
                boxes.append(SampleBox(
                    extent=tuple(extent),
                    offset=origin,
                    xyz=cloud.xyz[members] - origin,
                    indices=members,
                    source_xyz=cloud.xyz[members],
                ))
    return boxes

"""Graph-based single-tree instance segmentation.

Stages, in order: normalize heights against the terrain class, cluster a
stem slice into seeds, build a capped-radius graph through the stem points,
sweep a gap-budgeted multi-source shortest path from the seeds, then voxelize
the vegetation and attach it to the attributed wood through a second graph.
Any stage can fail on degenerate input; failures surface as a structured
:class:`PipelineFailure` naming the stage so that callers (in particular the
hyperparameter optimizer) can treat a broken parameter set as data instead of
crashing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import spatial

from ._kernels import shortest_path_assign
from .core import UNASSIGNED, LabeledCloud, SemanticLabel, group_by_rows

K_MAX_NEIGHBORS = 16  # per-vertex cap when building radius graphs
HEIGHT_TILE_SIZE = 1.0  # horizontal tile for ground-elevation interpolation


class PipelineFailure(Exception):
    """Structured segmentation failure carrying the failing stage name."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        self.message = message
        super().__init__(f"{stage}: {message}")


@dataclass(frozen=True)
class SegmentationParams:
    """The eight tunable instance-segmentation hyperparameters (lengths in
    meters)."""

    slice_thickness: float = 0.5
    find_stems_height: float = 1.0
    find_stems_thickness: float = 0.5
    find_stems_min_points: int = 30
    graph_edge_length: float = 1.0
    graph_maximum_cumulative_gap: float = 3.0
    add_leaves_voxel_length: float = 0.25
    add_leaves_edge_length: float = 1.0

    def __post_init__(self):
        for name in ("slice_thickness", "find_stems_height", "find_stems_thickness",
                     "graph_edge_length", "graph_maximum_cumulative_gap",
                     "add_leaves_voxel_length", "add_leaves_edge_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.find_stems_min_points < 1:
            raise ValueError("find_stems_min_points must be >= 1")

    def to_dict(self) -> dict:
        return {
            "slice_thickness": self.slice_thickness,
            "find_stems_height": self.find_stems_height,
            "find_stems_thickness": self.find_stems_thickness,
            "find_stems_min_points": self.find_stems_min_points,
            "graph_edge_length": self.graph_edge_length,
            "graph_maximum_cumulative_gap": self.graph_maximum_cumulative_gap,
            "add_leaves_voxel_length": self.add_leaves_voxel_length,
            "add_leaves_edge_length": self.add_leaves_edge_length,
        }

    @classmethod
    def from_dict(cls, values: dict) -> "SegmentationParams":
        kwargs = dict(values)
        if "find_stems_min_points" in kwargs:
            kwargs["find_stems_min_points"] = int(round(kwargs["find_stems_min_points"]))
        return cls(**kwargs)


@dataclass(frozen=True)
class StemSeed:
    """Seed cluster anchoring one tree instance."""

    seed_id: int
    indices: np.ndarray  # cloud point ids of the cluster members
    centroid: np.ndarray


@dataclass(frozen=True)
class PointGraph:
    """Undirected weighted graph over a subset of cloud points, stored as CSR.

    ``point_ids[v]`` maps vertex v back to its cloud point index. Edge weights
    are Euclidean lengths, all bounded by the edge-length cap used to build
    the graph."""

    point_ids: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.point_ids)

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2


def dbscan_labels(xyz: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Plain DBSCAN over a kd-tree; the query point counts toward
    min_samples. Returns -1 for noise, else 0-based cluster labels assigned
    in order of the lowest core point index."""
    n = len(xyz)
    tree = spatial.cKDTree(xyz)
    neighborhoods = tree.query_ball_point(xyz, r=eps)
    core = np.fromiter((len(nb) >= min_samples for nb in neighborhoods), dtype=bool, count=n)
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for start in range(n):
        if labels[start] != -1 or not core[start]:
            continue
        labels[start] = cluster
        stack = [start]
        while stack:
            j = stack.pop()
            for q in neighborhoods[j]:
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        stack.append(q)
        cluster += 1
    return labels


def normalize_heights(cloud: LabeledCloud) -> LabeledCloud:
    """Attach height above ground, interpolated from the terrain class.

    The ground elevation under a point is the minimum terrain z within its
    1 m horizontal tile; points in tiles without terrain fall back to the z of
    the globally nearest terrain point. Taking the tile minimum rather than
    the nearest terrain point keeps heights usable when the classifier
    mislabels canopy points as terrain, since such fakes always sit above the
    true ground."""
    if cloud.semantic is None:
        raise ValueError("normalize_heights requires semantic labels")
    terrain = np.flatnonzero(cloud.semantic == SemanticLabel.TERRAIN)
    if len(terrain) == 0:
        raise ValueError("no terrain points in cloud")

    xy = cloud.xyz[:, :2]
    origin = xy.min(axis=0)
    keys = np.floor((xy - origin) / HEIGHT_TILE_SIZE).astype(np.int64)

    tile_floor: dict[tuple[int, int], float] = {}
    t_uniq, t_start, t_order = group_by_rows(keys[terrain])
    t_bounds = np.append(t_start, len(terrain))
    for i in range(len(t_uniq)):
        members = terrain[t_order[t_bounds[i]:t_bounds[i + 1]]]
        tile_floor[tuple(t_uniq[i])] = float(cloud.xyz[members, 2].min())

    ground_z = np.empty(len(cloud))
    global_tree = spatial.cKDTree(xy[terrain])
    uniq, start, order = group_by_rows(keys)
    bounds = np.append(start, len(cloud))
    for i in range(len(uniq)):
        members = order[bounds[i]:bounds[i + 1]]
        floor = tile_floor.get(tuple(uniq[i]))
        if floor is None:
            _, nearest = global_tree.query(xy[members])
            ground_z[members] = cloud.xyz[terrain[np.atleast_1d(nearest)], 2]
        else:
            ground_z[members] = floor
    return cloud.with_height(cloud.xyz[:, 2] - ground_z)


def find_stems(cloud: LabeledCloud, p: SegmentationParams) -> list[StemSeed]:
    """Cluster the stem-labeled points inside the seeding height slice.

    Clusters with at least ``find_stems_min_points`` members become seeds,
    numbered by descending member count (ties by lowest member index)."""
    if cloud.height is None:
        raise ValueError("heights must be normalized before find_stems")
    if cloud.semantic is None:
        raise ValueError("find_stems requires semantic labels")
    lo = p.find_stems_height
    hi = p.find_stems_height + p.find_stems_thickness
    in_slice = ((cloud.semantic == SemanticLabel.STEM)
                & (cloud.height >= lo) & (cloud.height <= hi))
    slice_idx = np.flatnonzero(in_slice)
    if len(slice_idx) == 0:
        return []

    labels = dbscan_labels(cloud.xyz[slice_idx], eps=p.find_stems_thickness / 2.0,
                           min_samples=p.find_stems_min_points)
    clusters = []
    for cid in range(labels.max() + 1 if len(labels) else 0):
        members = slice_idx[labels == cid]
        if len(members) >= p.find_stems_min_points:
            clusters.append(members)
    clusters.sort(key=lambda m: (-len(m), m.min()))
    return [
        StemSeed(seed_id=i, indices=members, centroid=cloud.xyz[members].mean(axis=0))
        for i, members in enumerate(clusters)
    ]


def _csr_from_edges(n_vertices: int, edges_u: np.ndarray, edges_v: np.ndarray,
                    lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetric CSR from unique undirected edges."""
    src = np.concatenate([edges_u, edges_v])
    dst = np.concatenate([edges_v, edges_u])
    w = np.concatenate([lengths, lengths])
    order = np.argsort(src * n_vertices + dst, kind="stable")
    src, dst, w = src[order], dst[order], w[order]
    indptr = np.zeros(n_vertices + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst.astype(np.int64), w


def _knn_edges(points: np.ndarray, query_idx: np.ndarray, candidate_idx: np.ndarray,
               cap: float, k_max: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Edges from each query vertex to its nearest candidates within ``cap``.

    Indices are positions into ``points``; self pairs are dropped and pairs
    come back canonicalized (u < v) but may repeat across calls."""
    tree = spatial.cKDTree(points[candidate_idx])
    k = min(k_max + 1, len(candidate_idx))
    dist, nb = tree.query(points[query_idx], k=k)
    dist = dist.reshape(len(query_idx), k)
    nb = nb.reshape(len(query_idx), k)
    src = np.repeat(query_idx, k)
    dst = candidate_idx[nb.ravel()]
    length = dist.ravel()
    keep = (length <= cap) & (src != dst) & np.isfinite(length)
    src, dst, length = src[keep], dst[keep], length[keep]
    u = np.minimum(src, dst)
    v = np.maximum(src, dst)
    return u, v, length


def _dedupe_edges(u: np.ndarray, v: np.ndarray, length: np.ndarray, n_vertices: int):
    if len(u) == 0:
        return u, v, length
    _, first = np.unique(u * n_vertices + v, return_index=True)
    first.sort()
    return u[first], v[first], length[first]


def build_wood_graph(cloud: LabeledCloud, p: SegmentationParams) -> PointGraph:
    """Graph through the stem-labeled points.

    Edges connect each vertex to at most ``K_MAX_NEIGHBORS`` neighbors within
    ``graph_edge_length``; candidates are restricted to the vertex's own and
    the two adjacent horizontal slices of ``slice_thickness``."""
    if cloud.semantic is None:
        raise ValueError("build_wood_graph requires semantic labels")
    point_ids = np.flatnonzero(cloud.semantic == SemanticLabel.STEM)
    n = len(point_ids)
    if n == 0:
        raise ValueError("no stem-labeled points to build a graph over")
    coords = cloud.xyz[point_ids]
    vertical = cloud.height[point_ids] if cloud.height is not None else coords[:, 2]
    slab = np.floor(vertical / p.slice_thickness).astype(np.int64)

    by_slab: dict[int, np.ndarray] = {}
    for s in np.unique(slab):
        by_slab[int(s)] = np.flatnonzero(slab == s)

    all_u, all_v, all_w = [], [], []
    for s, members in by_slab.items():
        cand = [by_slab.get(s + d) for d in (-1, 0, 1)]
        candidates = np.concatenate([c for c in cand if c is not None])
        u, v, w = _knn_edges(coords, members, candidates, p.graph_edge_length, K_MAX_NEIGHBORS)
        all_u.append(u)
        all_v.append(v)
        all_w.append(w)
    u, v, w = _dedupe_edges(np.concatenate(all_u), np.concatenate(all_v), np.concatenate(all_w), n)
    indptr, indices, weights = _csr_from_edges(n, u, v, w)
    return PointGraph(point_ids=point_ids, indptr=indptr, indices=indices, weights=weights)


def attribute_wood(cloud: LabeledCloud, graph: PointGraph, seeds: list[StemSeed],
                   p: SegmentationParams) -> LabeledCloud:
    """Assign each reachable graph vertex the instance of its nearest seed by
    path length, pruning paths whose cumulative gap (summed edge-length excess
    over ``add_leaves_voxel_length``) exceeds ``graph_maximum_cumulative_gap``.
    Ties go to the lower seed id; unreachable vertices stay unassigned."""
    if not seeds:
        raise ValueError("attribute_wood requires at least one seed")
    vertex_of = np.full(len(cloud), -1, dtype=np.int64)
    vertex_of[graph.point_ids] = np.arange(graph.n_vertices)

    sources, labels = [], []
    for seed in seeds:
        verts = vertex_of[seed.indices]
        verts = verts[verts >= 0]
        sources.append(verts)
        labels.append(np.full(len(verts), seed.seed_id, dtype=np.int64))
    sources = np.concatenate(sources)
    labels = np.concatenate(labels)

    gap_costs = np.maximum(0.0, graph.weights - p.add_leaves_voxel_length)
    _, assigned, _ = shortest_path_assign(
        graph.indptr, graph.indices, graph.weights, gap_costs,
        sources, labels, float(p.graph_maximum_cumulative_gap))

    # first assignment stage: any instance labels on the input are discarded
    instance = np.full(len(cloud), UNASSIGNED, dtype=np.int64)
    hit = assigned >= 0
    instance[graph.point_ids[hit]] = assigned[hit]
    return cloud.with_instance(instance)


def add_leaves(cloud: LabeledCloud, p: SegmentationParams) -> LabeledCloud:
    """Attach vegetation to the attributed wood.

    Vegetation is voxelized at ``add_leaves_voxel_length`` (one representative
    per voxel, lowest point index, grid anchored at the vegetation minimum);
    representatives link to each other and to already-attributed wood within
    ``add_leaves_edge_length`` and inherit the instance of the nearest wood by
    path length. Every point in a voxel takes its representative's instance."""
    if cloud.semantic is None or cloud.instance is None:
        raise ValueError("add_leaves requires semantic labels and wood attribution")
    veg_idx = np.flatnonzero(cloud.semantic == SemanticLabel.VEGETATION)
    wood_idx = np.flatnonzero(cloud.instance != UNASSIGNED)
    if len(veg_idx) == 0 or len(wood_idx) == 0:
        return cloud

    keys = np.floor((cloud.xyz[veg_idx] - cloud.xyz[veg_idx].min(axis=0))
                    / p.add_leaves_voxel_length).astype(np.int64)
    _, start, order = group_by_rows(keys)
    bounds = np.append(start, len(veg_idx))
    groups = [np.sort(order[bounds[i]:bounds[i + 1]]) for i in range(len(start))]
    reps = veg_idx[np.array([g[0] for g in groups], dtype=np.int64)]

    # graph nodes: attributed wood first (the sources), then representatives
    nodes = np.concatenate([wood_idx, reps])
    coords = cloud.xyz[nodes]
    n_wood = len(wood_idx)
    rep_positions = np.arange(n_wood, n_wood + len(reps))

    u, v, w = _knn_edges(coords, rep_positions, np.arange(len(nodes)),
                         p.add_leaves_edge_length, K_MAX_NEIGHBORS)
    u, v, w = _dedupe_edges(u, v, w, len(nodes))
    indptr, indices, weights = _csr_from_edges(len(nodes), u, v, w)

    sources = np.arange(n_wood, dtype=np.int64)
    labels = cloud.instance[wood_idx]
    _, assigned, _ = shortest_path_assign(
        indptr, indices, weights, np.zeros_like(weights), sources, labels, np.inf)

    instance = cloud.instance.copy()
    rep_assigned = assigned[n_wood:]
    for g, inst in zip(groups, rep_assigned):
        if inst >= 0:
            instance[veg_idx[g]] = inst
    return cloud.with_instance(instance)


def segment_instances(cloud: LabeledCloud, p: SegmentationParams) -> LabeledCloud:
    """Run the full instance pipeline; wraps stage errors in PipelineFailure."""
    if cloud.semantic is None:
        raise PipelineFailure("segment_instances", "semantic labels missing")

    stage = "normalize_heights"
    try:
        cloud = normalize_heights(cloud)
        stage = "find_stems"
        seeds = find_stems(cloud, p)
        if not seeds:
            raise PipelineFailure("find_stems", "no stem seeds found")
        stage = "build_wood_graph"
        graph = build_wood_graph(cloud, p)
        stage = "attribute_wood"
        cloud = attribute_wood(cloud, graph, seeds, p)
        stage = "add_leaves"
        cloud = add_leaves(cloud, p)
    except PipelineFailure:
        raise
    except Exception as exc:
        raise PipelineFailure(stage, str(exc)) from exc
    return cloud

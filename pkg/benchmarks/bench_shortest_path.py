"""Benchmark the numba shortest-path kernel against the pure-Python fallback.

The multi-source gap-budgeted Dijkstra is the hot loop of instance
segmentation: it runs once over the stem graph and once over the leaf graph
for every plot, and the hyperparameter optimizer multiplies that by the trial
budget. Usage::

    python benchmarks/bench_shortest_path.py [n_trees ...]
"""

import sys
import time

import numpy as np

from forestseg._kernels import select_impl
from forestseg.core import SemanticLabel
from forestseg.instance import SegmentationParams, build_wood_graph, find_stems, normalize_heights
from forestseg.synthetic import generate_plot


def forest_graph(n_trees, seed=0):
    cloud = normalize_heights(generate_plot(n_trees, seed=seed))
    params = SegmentationParams()
    graph = build_wood_graph(cloud, params)
    seeds = find_stems(cloud, params)
    vertex_of = np.full(len(cloud), -1, dtype=np.int64)
    vertex_of[graph.point_ids] = np.arange(graph.n_vertices)
    sources, labels = [], []
    for s in seeds:
        verts = vertex_of[s.indices]
        verts = verts[verts >= 0]
        sources.append(verts)
        labels.append(np.full(len(verts), s.seed_id, dtype=np.int64))
    gap_costs = np.maximum(0.0, graph.weights - params.add_leaves_voxel_length)
    return (graph.indptr, graph.indices, graph.weights, gap_costs,
            np.concatenate(sources), np.concatenate(labels),
            float(params.graph_maximum_cumulative_gap)), graph


def time_impl(impl, args, repeats=5):
    impl(*args)  # warm-up (numba compiles here)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        impl(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv):
    sizes = [int(a) for a in argv[1:]] or [5, 15, 30]
    njit_impl = select_impl(True)
    py_impl = select_impl(False)

    print(f"{'trees':>6} {'vertices':>9} {'edges':>9} {'python_ms':>10} {'numba_ms':>9} {'speedup':>8}")
    for n in sizes:
        args, graph = forest_graph(n)
        t_py = time_impl(py_impl, args)
        t_nb = time_impl(njit_impl, args)
        d_py, l_py, g_py = py_impl(*args)
        d_nb, l_nb, g_nb = njit_impl(*args)
        assert np.array_equal(d_py, d_nb) and np.array_equal(l_py, l_nb) \
            and np.array_equal(g_py, g_nb), "implementations diverged"
        print(f"{n:>6} {graph.n_vertices:>9} {graph.n_edges:>9} "
              f"{t_py * 1e3:>10.2f} {t_nb * 1e3:>9.2f} {t_py / t_nb:>8.1f}x")
    print("\nresults verified identical between implementations")


if __name__ == "__main__":
    main(sys.argv)

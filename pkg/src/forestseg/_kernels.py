"""Hot numeric kernels with numba-compiled and pure-Python variants.

The heavy inner loop of the segmentation stage is a multi-source shortest-path
sweep over a CSR point graph. The numba variant is used by default; setting
the environment variable ``FORESTSEG_NUMBA`` to ``0``/``false``/``off`` (or a
failed numba import) selects the pure-Python fallback. Both variants produce
bit-identical results; ``benchmarks/bench_shortest_path.py`` compares their
speed.
"""

from __future__ import annotations

import heapq
import os

import numpy as np

_FALSY = {"0", "false", "off", "no"}


def numba_requested() -> bool:
    return os.environ.get("FORESTSEG_NUMBA", "1").strip().lower() not in _FALSY


def shortest_path_assign_py(indptr, indices, weights, gap_costs,
                            sources, source_labels, gap_budget):
    """Multi-source Dijkstra with a cumulative-gap budget (pure Python).

    Vertices are settled in order of (path length, label, vertex); a
    relaxation whose running gap cost would exceed ``gap_budget`` is pruned,
    so every assigned vertex has a witness path within budget. Exact
    path-length ties resolve to the lower label. Returns (dist, label, gap)
    arrays; label -1 marks vertices never reached within budget.
    """
    n = len(indptr) - 1
    dist = np.full(n, np.inf)
    gap = np.full(n, np.inf)
    label = np.full(n, -1, dtype=np.int64)

    heap = []
    for v, lab in zip(sources, source_labels):
        v = int(v)
        lab = int(lab)
        if dist[v] > 0.0 or lab < label[v]:
            dist[v] = 0.0
            gap[v] = 0.0
            label[v] = lab
            heapq.heappush(heap, (0.0, lab, v))

    while heap:
        d, lab, v = heapq.heappop(heap)
        if d != dist[v] or lab != label[v]:
            continue
        g = gap[v]
        for e in range(indptr[v], indptr[v + 1]):
            u = indices[e]
            ng = g + gap_costs[e]
            if ng > gap_budget:
                continue
            nd = d + weights[e]
            if nd < dist[u] or (nd == dist[u] and lab < label[u]):
                dist[u] = nd
                gap[u] = ng
                label[u] = lab
                heapq.heappush(heap, (nd, lab, u))
    return dist, label, gap


def _build_numba_impl():
    from numba import njit

    @njit(cache=True, nogil=True)
    def _less(h_dist, h_label, h_vert, i, j):
        if h_dist[i] != h_dist[j]:
            return h_dist[i] < h_dist[j]
        if h_label[i] != h_label[j]:
            return h_label[i] < h_label[j]
        return h_vert[i] < h_vert[j]

    @njit(cache=True, nogil=True)
    def _swap(h_dist, h_label, h_vert, i, j):
        h_dist[i], h_dist[j] = h_dist[j], h_dist[i]
        h_label[i], h_label[j] = h_label[j], h_label[i]
        h_vert[i], h_vert[j] = h_vert[j], h_vert[i]

    @njit(cache=True, nogil=True)
    def _push(h_dist, h_label, h_vert, size, d, lab, v):
        i = size
        h_dist[i] = d
        h_label[i] = lab
        h_vert[i] = v
        while i > 0:
            p = (i - 1) >> 1
            if _less(h_dist, h_label, h_vert, i, p):
                _swap(h_dist, h_label, h_vert, i, p)
                i = p
            else:
                break
        return size + 1

    @njit(cache=True, nogil=True)
    def _kernel(indptr, indices, weights, gap_costs, sources, source_labels, gap_budget):
        n = len(indptr) - 1
        dist = np.full(n, np.inf)
        gap = np.full(n, np.inf)
        label = np.full(n, -1, dtype=np.int64)

        # heap over (dist, label, vertex); capacity bounds the pushes: one per
        # source plus at most one per successful edge relaxation
        cap = len(indices) + len(sources) + 1
        h_dist = np.empty(cap)
        h_label = np.empty(cap, dtype=np.int64)
        h_vert = np.empty(cap, dtype=np.int64)
        size = 0

        for s in range(len(sources)):
            v = sources[s]
            lab = source_labels[s]
            if dist[v] > 0.0 or lab < label[v]:
                dist[v] = 0.0
                gap[v] = 0.0
                label[v] = lab
                size = _push(h_dist, h_label, h_vert, size, 0.0, lab, v)

        while size > 0:
            d = h_dist[0]
            lab = h_label[0]
            v = h_vert[0]
            size -= 1
            h_dist[0] = h_dist[size]
            h_label[0] = h_label[size]
            h_vert[0] = h_vert[size]
            i = 0
            while True:
                l = 2 * i + 1
                r = l + 1
                m = i
                if l < size and _less(h_dist, h_label, h_vert, l, m):
                    m = l
                if r < size and _less(h_dist, h_label, h_vert, r, m):
                    m = r
                if m == i:
                    break
                _swap(h_dist, h_label, h_vert, i, m)
                i = m

            if d != dist[v] or lab != label[v]:
                continue
            g = gap[v]
            for e in range(indptr[v], indptr[v + 1]):
                u = indices[e]
                ng = g + gap_costs[e]
                if ng > gap_budget:
                    continue
                nd = d + weights[e]
                if nd < dist[u] or (nd == dist[u] and lab < label[u]):
                    dist[u] = nd
                    gap[u] = ng
                    label[u] = lab
                    size = _push(h_dist, h_label, h_vert, size, nd, lab, u)

        return dist, label, gap

    return _kernel


_numba_impl = None


def shortest_path_assign_njit(indptr, indices, weights, gap_costs,
                              sources, source_labels, gap_budget):
    """Numba-compiled variant of :func:`shortest_path_assign_py`."""
    global _numba_impl
    if _numba_impl is None:
        _numba_impl = _build_numba_impl()
    return _numba_impl(indptr, indices, weights, gap_costs, sources, source_labels, gap_budget)


def select_impl(use_numba: bool):
    """Pick a kernel implementation explicitly (used by tests and benchmarks)."""
    return shortest_path_assign_njit if use_numba else shortest_path_assign_py


def _resolve_default():
    if not numba_requested():
        return shortest_path_assign_py
    try:
        import numba  # noqa: F401
    except ImportError:
        return shortest_path_assign_py
    return shortest_path_assign_njit


shortest_path_assign = _resolve_default()


def using_numba() -> bool:
    return shortest_path_assign is shortest_path_assign_njit

"""Timing of neighborhood construction: octree versus brute-force searches.

The octree method builds the tree and extracts the parent-to-children
neighborhoods of every layer. The baselines compute all pairwise distances
in row chunks: a fixed-radius range search with the layer-1 kernel radius
and a K-nearest-neighbor search. Both baselines are quadratic in the number
of points, the octree is close to ``n log n``.
"""

from __future__ import annotations

import csv
import time

import numpy as np

from .octree import build_octree, layer_offsets, layer_radius

METHODS = ("octree", "brute-force-range", "brute-force-knn")
CHUNK_ELEMENTS = 1 << 22


def _sq_distances(points, sq_norms, rows):
    block = points[rows]
    d = sq_norms[rows, None] + sq_norms[None, :] - 2.0 * (block @ points.T)
    np.maximum(d, 0.0, out=d)
    return d


def _chunks(n):
    step = max(1, CHUNK_ELEMENTS // max(n, 1))
    for s in range(0, n, step):
        yield slice(s, min(s + step, n))


def brute_force_range(points, radius):
    """All neighbors within ``radius`` of every point, as CSR ``(starts, indices)``."""
    points = np.asarray(points, dtype=np.float64)
    sq = np.einsum("ij,ij->i", points, points)
    r2 = radius * radius
    counts, indices = [], []
    for rows in _chunks(len(points)):
        hit_rows, hit_cols = np.nonzero(_sq_distances(points, sq, rows) <= r2)
        counts.append(np.bincount(hit_rows, minlength=rows.stop - rows.start))
        indices.append(hit_cols)
    starts = np.concatenate([[0], np.cumsum(np.concatenate(counts))])
    return starts, np.concatenate(indices)


def brute_force_knn(points, k):
    """Indices of the ``k`` nearest points (self included) for every point, unsorted."""
    points = np.asarray(points, dtype=np.float64)
    k = min(k, len(points))
    sq = np.einsum("ij,ij->i", points, points)
    out = np.empty((len(points), k), dtype=np.int64)
    for rows in _chunks(len(points)):
        d = _sq_distances(points, sq, rows)
        out[rows] = np.argpartition(d, k - 1, axis=1)[:, :k] if k < len(points) else np.argsort(d, axis=1)
    return out


def octree_neighborhoods(points, depth):
    tree = build_octree(points, depth)
    offsets = [layer_offsets(tree, l) for l in range(1, depth + 1)]
    return tree, offsets


def _time_ms(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, (time.perf_counter() - t0) * 1e3)
    return best


def neighborhood_benchmark(sizes, methods=METHODS, depth=6, k=32, seed=0, repeats=1):
    """Time each method on a uniform random cloud in ``[-1, 1]^3`` per size.

    Returns rows ``(method, n_points, ms)``; ``ms`` is the best of ``repeats``.
    The range radius is ``layer_radius(tree, 1)`` of that cloud's octree.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
    if any(int(n) < 1 for n in sizes):
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        pts = rng.uniform(-1.0, 1.0, (int(n), 3))
        radius = layer_radius(build_octree(pts, depth), 1)
        jobs = {
            "octree": lambda: octree_neighborhoods(pts, depth),
            "brute-force-range": lambda: brute_force_range(pts, radius),
            "brute-force-knn": lambda: brute_force_knn(pts, k),
        }
        for method in METHODS:
            if method in methods:
                rows.append((method, int(n), _time_ms(jobs[method], repeats)))
    return rows


def write_benchmark_csv(path_or_file, rows):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n_points", "ms"])
        for method, n, ms in rows:
            w.writerow([method, n, f"{ms:.3f}"])
    finally:
        if own:
            fh.close()


def read_benchmark_csv(path) -> list:
    with open(path, newline="") as fh:
        return [(r["method"], int(r["n_points"]), float(r["ms"])) for r in csv.DictReader(fh)]


def loglog_slope(rows, method) -> float:
    """Least-squares slope of ``log(ms)`` against ``log(n_points)`` for one method."""
    pts = [(n, ms) for m, n, ms in rows if m == method]
    if len(pts) < 2:
        raise ValueError(f"need at least two sizes for {method}")
    n, ms = np.array(pts, dtype=np.float64).T
    return float(np.polyfit(np.log(n), np.log(ms), 1)[0])

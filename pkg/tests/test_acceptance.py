"""Acceptance criteria. Each test prints one PASS/FAIL line before asserting."""

import time
from fractions import Fraction

import numpy as np

from octsphere import gradcheck
from octsphere.bench import loglog_slope, neighborhood_benchmark
from octsphere.kernel import KernelGeometry, bin_index, make_geometry
from octsphere.octree import build_octree
from octsphere.training import classification_scores, mean_iou
from oracles import octant_paths, oracle_bin, record_acceptance, tricky_offsets


def report(number, name, ok, detail):
    record_acceptance(f"[{number}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


def test_01_asymmetry():
    rng = np.random.default_rng(2024)
    # integer lattice offsets include the vertical axis, where only the elevation split separates d and -d
    r = np.arange(-3, 4)
    lattice = np.array(np.meshgrid(r, r, r)).reshape(3, -1).T.astype(float)
    lattice = lattice[np.any(lattice != 0, axis=1)]
    d = np.vstack([lattice, rng.standard_normal((100_000 - len(lattice), 3))])
    legal = make_geometry(8, 2, 3, 1.0)
    illegal = KernelGeometry(8, 1, 3, np.linspace(-np.pi, np.pi, 9), np.array([-np.pi / 2, np.pi / 2]),
                             legal.r_edges.copy(), 1.0)
    start = time.perf_counter()
    legal_bad = int(np.sum(bin_index(legal, d) == bin_index(legal, -d)))
    illegal_bad = int(np.sum(bin_index(illegal, d) == bin_index(illegal, -d)))
    seconds = time.perf_counter() - start
    ok = legal_bad == 0 and illegal_bad > 0 and seconds < 1.0
    assert report(1, "asymmetry", ok, f"legal violations {legal_bad}/100000, "
                  f"illegal violations {illegal_bad}, {seconds:.3f} s")


def test_02_kernel_count():
    ref = make_geometry(4, 4, 3, np.sqrt(3.0), radial_edges=[0.0, 1.0, np.sqrt(2.0), np.sqrt(3.0)])
    default = make_geometry(8, 2, 3, 1.0)
    ok = ref.num_bins == 49 and default.num_bins == 49
    assert report(2, "kernel count", ok, f"4x4x3+1 = {ref.num_bins}, 8x2x3+1 = {default.num_bins}")


def test_03_oracle_equivalence():
    rng = np.random.default_rng(7)
    mismatches, shapes = 0, []
    for _ in range(5):
        g = make_geometry(int(rng.choice([4, 6, 8, 12])), int(rng.choice([2, 4, 6])), int(rng.integers(1, 5)),
                          float(rng.uniform(0.2, 3.0)))
        d = tricky_offsets(g, rng, 10_000)
        want = np.array([oracle_bin(g, x) for x in d])
        mismatches += int(np.sum(bin_index(g, d) != want))
        shapes.append(f"{g.n}x{g.p}x{g.q}")
    assert report(3, "bin oracle", mismatches == 0,
                  f"{mismatches} mismatches over 5 x 10000 offsets, geometries {' '.join(shapes)}")


def _octree_failures(points, depth, rng, with_paths):
    tree = build_octree(points, depth)
    n = len(points)
    for l in range(1, depth + 1):
        if tree.point_counts[l].sum() != n:
            return "conservation"
        if not np.array_equal(np.sort(tree.child_order[l]), np.arange(tree.layer_size(l - 1))):
            return "partition"
        below = tree.layers[l - 1][tree.child_order[l]]
        means = np.add.reduceat(below, tree.child_starts[l][:-1], axis=0) / tree.child_counts[l][:, None]
        if np.abs(tree.layers[l] - means).max() > 1e-9:
            return "children mean"
    perm = rng.permutation(n)
    other = build_octree(points[perm], depth)
    if not all(np.array_equal(a, b) for a, b in zip(tree.layers[1:], other.layers[1:])):
        return "permutation"
    if with_paths:
        paths = octant_paths(points, tree.bounds[0], tree.side, depth)
        anc = tree.ancestors(1)
        first = {}
        for a, p in zip(anc.tolist(), paths):
            if first.setdefault(a, p) != p:
                return "octant paths"
        if len(first) != len(set(paths)):
            return "octant paths"
    return None


def test_04_octree_correctness():
    rng = np.random.default_rng(99)
    start = time.perf_counter()
    failures = []
    for i in range(100):
        n = int(rng.integers(1, 10_001))
        depth = int(rng.integers(1, 7))
        kind = i % 3
        if kind == 0:
            pts = rng.uniform(-1, 1, (n, 3))
        elif kind == 1:
            pts = rng.standard_normal((n, 3)) * rng.uniform(0.01, 100)
        else:
            # clustered cloud with exact duplicates
            pts = np.repeat(rng.standard_normal((max(1, n // 4), 3)), 4, axis=0)[:n]
        fail = _octree_failures(pts, depth, rng, with_paths=i < 20)
        if fail:
            failures.append(f"cloud {i}: {fail}")
    seconds = time.perf_counter() - start
    ok = not failures and seconds < 30
    assert report(4, "octree correctness", ok, f"100 clouds, {len(failures)} failures, {seconds:.1f} s"
                  + (f", {failures[:3]}" if failures else ""))


def test_05_gradient_checks():
    start = time.perf_counter()
    results = gradcheck.run_all(seed=0)
    seconds = time.perf_counter() - start
    per_op = [r for r in results if not r.name.startswith("network")]
    network = [r for r in results if r.name.startswith("network")]
    tolerances_ok = all(r.tol == 1e-5 for r in per_op) and all(r.tol == 1e-4 for r in network)
    ok = all(r.passed for r in results) and tolerances_ok and network and seconds < 120
    worst_op = max(r.max_rel_error for r in per_op)
    worst_net = max(r.max_rel_error for r in network)
    assert report(5, "gradient checks", ok, f"{sum(r.passed for r in results)}/{len(results)} pass, "
                  f"per-op max {worst_op:.1e}, network max {worst_net:.1e}, {seconds:.1f} s")


def test_06_desk_scale_learning(desk_scale_run):
    test_rows = [r for r in desk_scale_run.history if r[1] == "test"]
    best = max(r[3] for r in test_rows)
    first = next((r[0] for r in test_rows if r[3] >= 90.0), None)
    ok = len(test_rows) == 30 and best >= 90.0 and desk_scale_run.seconds < 15 * 60
    assert report(6, "desk-scale learning", ok, f"best test instance accuracy {best:.1f}%, "
                  f"first >= 90% at epoch {first}, final {test_rows[-1][3]:.1f}%, "
                  f"{desk_scale_run.seconds:.0f} s for 30 epochs")


def test_07_coarsening(desk_scale_run):
    bad = 0
    for cloud in desk_scale_run.test_set.clouds:
        tree = build_octree(cloud, 4)
        sizes = tree.layer_sizes()
        for l in range(1, 5):
            multi = np.any(tree.child_counts[l] >= 2)
            if sizes[l - 1] < sizes[l] or (multi and sizes[l - 1] == sizes[l]):
                bad += 1
    n = len(desk_scale_run.test_set)
    assert report(7, "coarsening", bad == 0, f"{n} test clouds, {bad} violating layers")


def test_08_neighborhood_scaling():
    sizes = [1000, 3000, 10_000, 30_000, 100_000]
    rows = neighborhood_benchmark(sizes, methods=("octree", "brute-force-range"), depth=6)
    ms = {(m, n): t for m, n, t in rows}
    s_oct, s_range = loglog_slope(rows, "octree"), loglog_slope(rows, "brute-force-range")
    faster = ms["octree", 100_000] < ms["brute-force-range", 100_000]
    ok = faster and s_oct < s_range
    assert report(8, "neighborhood scaling", ok, f"at 100000 points octree {ms['octree', 100_000]:.0f} ms vs "
                  f"range {ms['brute-force-range', 100_000]:.0f} ms, slopes {s_oct:.2f} vs {s_range:.2f}")


def test_09_construction_time():
    pts = np.random.default_rng(3).uniform(-1, 1, (10_000, 3))
    build_octree(pts, 6)
    times = []
    for _ in range(7):
        start = time.perf_counter()
        build_octree(pts, 6)
        times.append((time.perf_counter() - start) * 1e3)
    median = float(np.median(times))
    assert report(9, "construction time", median < 100, f"10000 points, depth 6, median {median:.1f} ms")


def test_10_metric_fixtures():
    cls, inst = classification_scores([0, 0, 0, 0, 1, 1, 1, 2, 2, 2], [0, 0, 0, 1, 1, 2, 2, 2, 2, 2])
    want_cls = float((Fraction(3, 4) + Fraction(1, 3) + 1) / 3 * 100)
    miou = mean_iou([np.array([0, 1, 1, 1]), np.array([1, 1, 0, 1])],
                    [np.array([0, 0, 1, 1]), np.array([1, 1, 1, 1])], [0, 1])
    want_miou = float((Fraction(7, 12) + Fraction(3, 8)) / 2 * 100)
    ok = inst == 70.0 and abs(cls - want_cls) <= 1e-13 and abs(miou - want_miou) <= 1e-13
    assert report(10, "metric fixtures", ok, f"instance {inst} (70), class {cls:.6f} ({want_cls:.6f}), "
                  f"mIoU {miou:.6f} ({want_miou:.6f})")

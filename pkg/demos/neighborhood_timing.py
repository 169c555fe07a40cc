"""
Neighborhood construction time
==============================

The octree yields every layer's neighborhoods in one sort, while a
brute-force radius or K-nearest search compares all pairs of points. The
log-log slope of time against size shows the difference in growth.
"""

from octsphere.bench import METHODS, loglog_slope, neighborhood_benchmark

rows = neighborhood_benchmark([1000, 2000, 4000, 8000], depth=6, k=32)
for method, n, ms in rows:
    print(f"{method:<18} {n:6d} points {ms:9.1f} ms")
for method in METHODS:
    print(f"{method:<18} slope {loglog_slope(rows, method):.2f}")

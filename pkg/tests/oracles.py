"""Independent reference implementations used as test oracles.

They are deliberately naive (scalar loops, direct interval tests, recursive
octant descent) and share no code paths with the library beyond its
public data containers.
"""

import math

import numpy as np

ACCEPTANCE_LINES = []


def record_acceptance(line):
    print(line)
    ACCEPTANCE_LINES.append(line)


# -- kernel bins -------------------------------------------------------------------

def _in_angle_bin(v, edges, k):
    last = k == len(edges) - 2
    return edges[k] <= v < edges[k + 1] or (last and v == edges[k + 1])


def _in_shell(r, edges, k):
    q = len(edges) - 1
    if k == 0 and r == edges[0]:
        return True
    if k == q - 1 and r > edges[-1]:
        return True
    return edges[k] < r <= edges[k + 1]


def oracle_bin(geom, d):
    """Bin by testing membership of ``d`` in every bin's edge intervals.

    Angles come from the library transform (tested on its own) so that a
    one-ulp difference between libm and numpy on an exact edge cannot
    masquerade as a binning bug. Asserts that exactly one bin claims the offset.
    """
    from octsphere.geometry import to_spherical

    theta, phi, r = (float(v) for v in to_spherical(np.asarray(d, dtype=np.float64)))
    if r < 1e-9 * geom.rho:
        return 0
    th = [k for k in range(geom.n) if _in_angle_bin(theta, geom.theta_edges, k)]
    ph = [k for k in range(geom.p) if _in_angle_bin(phi, geom.phi_edges, k)]
    rr = [k for k in range(geom.q) if _in_shell(r, geom.r_edges, k)]
    hits = [
        1 + kt + kp * geom.n + kr * geom.n * geom.p
        for kt in th for kp in ph for kr in rr
    ]
    assert len(hits) == 1, f"offset {d} claimed by bins {hits}"
    return hits[0]


def tricky_offsets(geom, rng, count):
    """Offsets that sit on bin edges, at the origin, beyond rho, and random."""
    out = [np.zeros(3), np.array([geom.rho * 2, 0.0, 0.0]), np.array([0.0, 0.0, geom.rho * 1e-12])]
    for t in geom.theta_edges:
        for p in geom.phi_edges:
            for r in list(geom.r_edges) + [geom.rho * 1.5]:
                out.append(np.array([r * math.cos(p) * math.cos(t), r * math.cos(p) * math.sin(t), r * math.sin(p)]))
    for r in geom.r_edges:
        out.extend([np.array([r, 0.0, 0.0]), np.array([0.0, -r, 0.0]), np.array([0.0, 0.0, r])])
    rand = rng.standard_normal((max(0, count - len(out)), 3)) * geom.rho * rng.uniform(0.05, 1.2, (max(0, count - len(out)), 1))
    return np.vstack([np.array(out), rand])[:count]


# -- octree ---------------------------------------------------------------------

def octant_paths(points, lo, side, depth):
    """Per point, the tuple of octant choices from the root down to ``depth``.

    Each level compares against the cube midpoint; ties go to the upper half.
    Points on the upper root face stay in the last cell.
    """
    pts = np.asarray(points, dtype=np.float64)
    paths = []
    for p in pts:
        cube_lo = np.array(lo, dtype=np.float64)
        s = float(side)
        path = []
        for _ in range(depth):
            half = s / 2.0
            bits = tuple(int(p[a] >= cube_lo[a] + half) for a in range(3))
            cube_lo = cube_lo + half * np.array(bits)
            s = half
            path.append(bits)
        paths.append(tuple(path))
    return paths


# -- convolution ------------------------------------------------------------------

def naive_conv(W, b, geometry, parent_locs, child_locs, children, features):
    """Average of ``W[bin(x_j - x_i)] a_j`` over every target's children, plus bias."""
    from octsphere.kernel import bin_index

    out = []
    for i, kids in enumerate(children):
        acc = np.zeros(W.shape[1])
        for j in kids:
            kappa = bin_index(geometry, child_locs[j] - parent_locs[i])
            acc += W[kappa] @ features[j]
        out.append(acc / len(kids) + b)
    return np.array(out)

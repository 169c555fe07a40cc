"""Octree construction over point clouds and the per-layer neuron sets it induces.

Network layer ``l`` (1..L) corresponds to tree depth ``L - l + 1``; layer 0
is the raw cloud. A node splits while it holds more than one point, so a
single-point node becomes a leaf whose point is carried unchanged down to
depth L. Because a lone point occupies exactly one octant at every deeper
level, the nodes at depth ``d`` are exactly the distinct depth-``d`` Morton
prefixes of the points, which is how the tree is built here: one sort by
Morton code, then one segmented reduction per layer.

Rows of every layer are in Morton order. Points within a leaf are ordered by
``(code, x, y, z)`` so layer locations do not depend on input order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud

MAX_DEPTH = 21


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between each of the low 21 bits of ``v``."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(cells: np.ndarray) -> np.ndarray:
    """Interleave integer cell coordinates (x in the lowest bit)."""
    cells = np.asarray(cells)
    return (
        _spread_bits(cells[..., 0])
        | (_spread_bits(cells[..., 1]) << np.uint64(1))
        | (_spread_bits(cells[..., 2]) << np.uint64(2))
    )


def morton_decode(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64)
    return np.stack(
        [_compact_bits(codes), _compact_bits(codes >> np.uint64(1)), _compact_bits(codes >> np.uint64(2))],
        axis=-1,
    ).astype(np.int64)


@dataclass
class OctreeNode:
    depth: int
    cube_center: np.ndarray
    cube_half_side: float
    location: np.ndarray
    children: list = field(default_factory=list)
    point_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    replicated: bool = False
    index: int = -1  # row in the corresponding layer


@dataclass(eq=False)
class Octree:
    """Depth-L octree stored layer by layer.

    ``layers[l]`` holds the neuron locations of layer ``l`` (``layers[0]`` is
    the raw cloud in input order). ``parent[l]`` maps every row of layer
    ``l - 1`` to its parent row in layer ``l``; ``child_order[l]`` lists the
    rows of layer ``l - 1`` grouped by parent, with group boundaries
    ``child_starts[l]``.
    """

    depth: int
    bounds: tuple
    layers: list
    codes: list
    parent: list
    child_order: list
    child_starts: list
    child_counts: list
    point_counts: list

    @property
    def points(self) -> np.ndarray:
        return self.layers[0]

    @property
    def side(self) -> float:
        return float(self.bounds[1][0] - self.bounds[0][0])

    def layer_size(self, l: int) -> int:
        return len(self.layers[l])

    def layer_sizes(self) -> list:
        return [len(q) for q in self.layers]

    def layer_depth(self, l: int) -> int:
        """Tree depth of the nodes backing network layer ``l``."""
        return self.depth - l + 1

    def children_of(self, l: int, i: int) -> np.ndarray:
        """Rows of layer ``l - 1`` that form the neighborhood of node ``i`` of layer ``l``."""
        s = self.child_starts[l]
        return self.child_order[l][s[i]:s[i + 1]]

    def ancestors(self, l: int) -> np.ndarray:
        """Row index in layer ``l`` of the ancestor of every raw point."""
        idx = np.arange(len(self.layers[0]))
        for k in range(1, l + 1):
            idx = self.parent[k][idx]
        return idx

    def node(self, l: int, i: int) -> OctreeNode:
        """Materialize node ``i`` of layer ``l`` (and its subtree) as objects."""
        d = self.layer_depth(l)
        lo = self.bounds[0]
        cell = morton_decode(self.codes[l][i:i + 1])[0]
        size = self.side / 2.0**d
        children_rows = self.children_of(l, i)
        replicated = False
        if l < self.depth:
            parent = self.parent[l + 1][i]
            replicated = self.point_counts[l][i] == 1 and self.point_counts[l + 1][parent] == 1
        n = OctreeNode(
            depth=d,
            cube_center=lo + (cell + 0.5) * size,
            cube_half_side=size / 2.0,
            location=self.layers[l][i],
            replicated=bool(replicated),
            index=int(i),
        )
        if l == 1:
            n.point_indices = children_rows.copy()
        else:
            n.children = [self.node(l - 1, int(c)) for c in children_rows]
        return n

    @property
    def root(self) -> OctreeNode:
        """The depth-0 node covering the root cube; its children form layer L."""
        lo, hi = self.bounds
        top = self.depth
        r = OctreeNode(
            depth=0,
            cube_center=(lo + hi) / 2.0,
            cube_half_side=self.side / 2.0,
            location=self.layers[top].mean(axis=0),
        )
        r.children = [self.node(top, i) for i in range(len(self.layers[top]))]
        return r


def _segments(sorted_keys: np.ndarray):
    """Start offsets of runs of equal values and the run id of every element."""
    change = np.empty(len(sorted_keys), dtype=bool)
    change[0] = True
    np.not_equal(sorted_keys[1:], sorted_keys[:-1], out=change[1:])
    starts = np.flatnonzero(change)
    return starts, np.cumsum(change) - 1


def root_cube(points: np.ndarray):
    """Tight axis-aligned cube around the bounding box (side = max extent)."""
    bmin, bmax = points.min(axis=0), points.max(axis=0)
    side = float((bmax - bmin).max())
    if side == 0.0:
        side = 2.0
    center = (bmin + bmax) / 2.0
    lo = center - side / 2.0
    return lo, lo + side


def build_octree(cloud, depth: int, bounds=None) -> Octree:
    """Partition a cloud into an octree of the given depth.

    ``cloud`` is a :class:`PointCloud` or an ``(m, 3)`` array. A point lying
    exactly on a splitting plane goes to the higher-coordinate octant; points
    on the upper root face stay in the last cell.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty input")
    if not isinstance(depth, (int, np.integer)) or depth < 1 or depth > MAX_DEPTH:
        raise ValueError("invalid depth")
    depth = int(depth)
    lo, hi = root_cube(pts) if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    side = float(hi[0] - lo[0])
    res = 1 << depth
    cells = np.floor((pts - lo) * (res / side)).astype(np.int64)
    np.clip(cells, 0, res - 1, out=cells)
    code = morton_encode(cells)

    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], code))
    sorted_code = code[order]
    starts, run = _segments(sorted_code)
    counts = np.diff(np.append(starts, len(pts)))

    parent1 = np.empty(len(pts), dtype=np.int64)
    parent1[order] = run
    loc = np.add.reduceat(pts[order], starts, axis=0) / counts[:, None]

    layers, codes = [pts, loc], [code, sorted_code[starts]]
    parent, child_order, child_starts = [None, parent1], [None, order], [None, np.append(starts, len(pts))]
    child_counts, point_counts = [None, counts], [np.ones(len(pts), dtype=np.int64), counts]

    for _ in range(2, depth + 1):
        prev_codes = codes[-1] >> np.uint64(3)
        starts, run = _segments(prev_codes)
        n_prev = len(prev_codes)
        ccount = np.diff(np.append(starts, n_prev))
        layers.append(np.add.reduceat(layers[-1], starts, axis=0) / ccount[:, None])
        codes.append(prev_codes[starts])
        parent.append(run)
        child_order.append(np.arange(n_prev))
        child_starts.append(np.append(starts, n_prev))
        child_counts.append(ccount)
        point_counts.append(np.add.reduceat(point_counts[-1], starts))

    return Octree(depth, (lo, hi), layers, codes, parent, child_order, child_starts, child_counts, point_counts)


def layer_radius(tree: Octree, l: int) -> float:
    """Kernel radius of layer ``l``: ``2**(l - L - 1) * |x_max - x_min|``."""
    if not 1 <= l <= tree.depth:
        raise ValueError(f"layer {l} out of range 1..{tree.depth}")
    lo, hi = tree.bounds
    return float(2.0 ** (l - tree.depth - 1) * np.linalg.norm(hi - lo))


def neighborhoods(tree: Octree, l: int):
    """Per node of layer ``l``: ``(location, child locations, child rows in layer l-1)``."""
    if not 1 <= l <= tree.depth:
        raise ValueError(f"layer {l} out of range 1..{tree.depth}")
    prev = tree.layers[l - 1]
    out = []
    for i, loc in enumerate(tree.layers[l]):
        rows = tree.children_of(l, i)
        out.append((loc, prev[rows], rows))
    return out


def layer_offsets(tree: Octree, l: int) -> np.ndarray:
    """Offsets ``x_child - x_parent`` for every row of layer ``l - 1``."""
    return tree.layers[l - 1] - tree.layers[l][tree.parent[l]]

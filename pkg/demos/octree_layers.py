"""
Octree layers as network layers
===============================

Every depth of an octree over a point cloud becomes one layer of neurons.
Leaves sit at the mean of their points and every inner node at the mean of
its children, so coarser layers hold fewer, smoother locations.
"""

import numpy as np

from octsphere.data import sample_surface
from octsphere.geometry import normalize_cloud, PointCloud
from octsphere.octree import build_octree, layer_radius, neighborhoods

rng = np.random.default_rng(1)
cloud, _ = normalize_cloud(PointCloud(sample_surface("torus", 2000, rng)))

# Depth 5 gives layer 0 (raw points) through layer 5, the occupied octants of the root cube.
tree = build_octree(cloud, 5)
for l, size in enumerate(tree.layer_sizes()):
    radius = f"  kernel radius {layer_radius(tree, l):.4f}" if l > 0 else ""
    print(f"layer {l}: {size:5d} neurons{radius}")

# The neighborhood of a layer-2 neuron is the set of its children in layer 1.
loc, kids, rows = max(neighborhoods(tree, 2), key=lambda nb: len(nb[2]))
print("neuron at", np.round(loc, 3), "has", len(rows), "children")
print("their mean:", np.round(kids.mean(axis=0), 3))

# Shuffling the input does not change the structure.
other = build_octree(cloud.points[rng.permutation(len(cloud))], 5)
print("same layers after shuffling:", all(np.array_equal(a, b) for a, b in zip(tree.layers[1:], other.layers[1:])))

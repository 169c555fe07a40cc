"""
Classification and segmentation forward passes
==============================================

A network applies a pointwise MLP to the raw points and then one spherical
convolution per octree layer, each aggregating a neuron's children. The
classifier pools features from every layer; the segmenter hands each point
the features of its ancestors.
"""

import numpy as np

from octsphere.data import sample_surface
from octsphere.geometry import PointCloud, normalize_cloud
from octsphere.network import Network, NetworkConfig
from octsphere.octree import build_octree

rng = np.random.default_rng(2)
cloud, _ = normalize_cloud(PointCloud(sample_surface("cube", 1024, rng)))
tree = build_octree(cloud, 4)

config = NetworkConfig(num_classes=3, mlp_channels=16, octree_channels=(32, 32, 64, 64))
net = Network(config, rng).eval()
logits = net.forward_classify(tree, cloud.features("xyz"))
print("class scores:", np.round(logits, 3))

seg = Network(NetworkConfig(task="segmentation", num_classes=4, mlp_channels=16,
                            octree_channels=(32, 32, 64, 64)), rng).eval()
per_point = seg.forward_segment(tree, cloud.features("xyz"))
print("per-point scores:", per_point.shape)
print("parameters:", sum(p.size for _, p, _ in net.parameters()))

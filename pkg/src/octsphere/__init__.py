"""Octree-guided convolutional networks with spherical kernels for point clouds."""

from .geometry import PointCloud, NormalizeTransform, normalize_cloud, to_cartesian, to_spherical
from .kernel import KernelGeometry, bin_index, make_geometry, validate_asymmetry
from .octree import Octree, OctreeNode, build_octree, layer_radius, neighborhoods
from .network import Network, NetworkConfig

__all__ = [
    "KernelGeometry",
    "Network",
    "NetworkConfig",
    "NormalizeTransform",
    "Octree",
    "OctreeNode",
    "PointCloud",
    "bin_index",
    "build_octree",
    "layer_radius",
    "make_geometry",
    "neighborhoods",
    "normalize_cloud",
    "to_cartesian",
    "to_spherical",
    "validate_asymmetry",
]

__version__ = "0.1.0"

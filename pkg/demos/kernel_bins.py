"""
Spherical kernel bins
=====================

A spherical kernel splits the ball around a neuron into azimuth, elevation
and radial bins plus one slot for the neuron itself. Each slot owns a weight
matrix, so the offset direction decides which weights apply.
"""

import numpy as np

from octsphere.kernel import KernelGeometry, bin_index, make_geometry, unravel_bin, validate_asymmetry

# The default division: 8 azimuth, 2 elevation and 3 radial bins, plus the self slot.
g = make_geometry(8, 2, 3, rho=1.0)
print("weight slots:", g.num_bins)
print("radial edges:", np.round(g.r_edges, 4))

# A few offsets and the slot they land in, with (azimuth, elevation, shell) components.
for d in ([0.0, 0.0, 0.0], [0.5, 0.1, 0.2], [-0.5, -0.1, -0.2], [0.0, 0.0, 3.0]):
    k = bin_index(g, np.array(d))
    print(f"offset {d} -> slot {k}", "" if k == 0 else unravel_bin(g, k))

# Opposite offsets never share a slot in a legal division.
d = np.random.default_rng(0).standard_normal((10_000, 3))
print("shared slots for d and -d:", int(np.sum(bin_index(g, d) == bin_index(g, -d))))

# A single elevation bin spans the horizontal plane, so straight up and straight
# down land in the same slot. The validator names the offending edge pair.
flat = KernelGeometry(8, 1, 3, g.theta_edges, np.array([-np.pi / 2, np.pi / 2]), g.r_edges, 1.0)
print(validate_asymmetry(flat).violations)
up = np.array([0.0, 0.0, 0.5])
print("up and down:", bin_index(flat, up), bin_index(flat, -up))

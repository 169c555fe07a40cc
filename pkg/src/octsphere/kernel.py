"""Spherical kernel geometry: bin edges, legality checks and bin assignment.

A kernel partitions a ball of radius ``rho`` into ``n`` azimuth x ``p``
elevation x ``q`` radial bins plus one extra bin (index 0) for offsets at
the origin. Bin ``kappa`` owns weight matrix ``W[kappa]`` of a convolution
layer.

Boundary rules: azimuth and elevation intervals are half-open
``[lo, hi)`` with the last interval closed; radial intervals are
right-closed ``(lo, hi]`` so that a shell edge belongs to the inner shell.
Offsets beyond ``rho`` are clamped to the outermost shell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import to_spherical

EPS_FACTOR = 1e-9


class KernelGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class AsymmetryReport:
    ok: bool
    violations: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


@dataclass(frozen=True, eq=False)
class KernelGeometry:
    n: int
    p: int
    q: int
    theta_edges: np.ndarray
    phi_edges: np.ndarray
    r_edges: np.ndarray
    rho: float

    @property
    def num_bins(self) -> int:
        """Weight-matrix slots including the self-convolution bin."""
        return self.n * self.p * self.q + 1

    @property
    def eps(self) -> float:
        return float(self.r_edges[0])

    def rescaled(self, rho: float) -> KernelGeometry:
        """Same partition with all radial edges scaled to a new radius."""
        if rho <= 0:
            raise KernelGeometryError("rho must be positive")
        r = self.r_edges * (rho / self.rho)
        r[-1] = rho
        return KernelGeometry(self.n, self.p, self.q, self.theta_edges, self.phi_edges, r, float(rho))

    def __eq__(self, other):
        if not isinstance(other, KernelGeometry):
            return NotImplemented
        return (
            (self.n, self.p, self.q, self.rho) == (other.n, other.p, other.q, other.rho)
            and np.array_equal(self.theta_edges, other.theta_edges)
            and np.array_equal(self.phi_edges, other.phi_edges)
            and np.array_equal(self.r_edges, other.r_edges)
        )


def _uniform_edges(lo: float, hi: float, k: int) -> np.ndarray:
    e = np.linspace(lo, hi, k + 1)
    e[np.abs(e) < 1e-12] = 0.0
    return e


def validate_asymmetry(geom: KernelGeometry) -> AsymmetryReport:
    """Check the sign conditions that guarantee asymmetric weight application.

    Every consecutive azimuth and elevation edge pair must not straddle
    zero (``e_k * e_{k+1} >= 0``) and there must be more than two azimuth
    bins. Each failing pair is listed in the report.
    """
    violations = []
    if geom.n <= 2:
        violations.append(f"n > 2 violated: n = {geom.n}")
    for name, edges in (("theta", geom.theta_edges), ("phi", geom.phi_edges)):
        for k in range(len(edges) - 1):
            if edges[k] * edges[k + 1] < 0:
                violations.append(
                    f"{name} edges [{k}]*[{k + 1}] = {edges[k]:.6g}*{edges[k + 1]:.6g} < 0"
                )
    return AsymmetryReport(not violations, violations)


def make_geometry(n: int, p: int, q: int, rho: float = 1.0, radial_edges=None) -> KernelGeometry:
    """Build a legal kernel geometry.

    Azimuth and elevation edges are uniform. Radial edges are uniform from
    ``eps = 1e-9 * rho`` to ``rho`` unless ``radial_edges`` (length q+1,
    ascending, ending at rho) is given; a leading 0 there is replaced by eps.
    """
    if n < 1 or p < 1 or q < 1:
        raise KernelGeometryError("bin counts must be positive")
    if not rho > 0:
        raise KernelGeometryError("rho must be positive")
    eps = EPS_FACTOR * rho
    if radial_edges is None:
        r = eps + np.arange(q + 1) * (rho - eps) / q
        r[-1] = rho
    else:
        r = np.array(radial_edges, dtype=np.float64)
        if len(r) != q + 1:
            raise KernelGeometryError(f"expected {q + 1} radial edges, got {len(r)}")
        if r[0] <= 0:
            r[0] = eps
        if not np.all(np.diff(r) > 0) or not np.isclose(r[-1], rho, rtol=1e-12, atol=0):
            raise KernelGeometryError("radial edges must ascend in (0, rho] and end at rho")
        r[-1] = rho
    geom = KernelGeometry(
        n, p, q,
        _uniform_edges(-np.pi, np.pi, n),
        _uniform_edges(-np.pi / 2, np.pi / 2, p),
        r,
        float(rho),
    )
    report = validate_asymmetry(geom)
    if not report:
        raise KernelGeometryError("illegal kernel geometry: " + "; ".join(report.violations))
    return geom


def bin_components(geom: KernelGeometry, delta):
    """Zero-based ``(k_theta, k_phi, k_r)`` and a mask of origin offsets."""
    sph = to_spherical(delta)
    theta, phi, r = sph[..., 0], sph[..., 1], sph[..., 2]
    kt = np.clip(np.searchsorted(geom.theta_edges, theta, side="right") - 1, 0, geom.n - 1)
    kp = np.clip(np.searchsorted(geom.phi_edges, phi, side="right") - 1, 0, geom.p - 1)
    kr = np.clip(np.searchsorted(geom.r_edges, r, side="left") - 1, 0, geom.q - 1)
    return kt, kp, kr, r < geom.eps


def bin_index(geom: KernelGeometry, delta):
    """Kernel bin of an offset ``x_j - x_i`` (or an array of them).

    Returns ``k_theta + (k_phi - 1) n + (k_r - 1) n p`` with one-based
    components, or 0 when the offset is shorter than ``eps``.
    """
    kt, kp, kr, origin = bin_components(geom, delta)
    kappa = 1 + kt + kp * geom.n + kr * geom.n * geom.p
    kappa = np.where(origin, 0, kappa)
    if np.ndim(kappa) == 0:
        return int(kappa)
    return kappa.astype(np.int64)


def unravel_bin(geom: KernelGeometry, kappa: int):
    """Inverse of the linear index: one-based ``(k_theta, k_phi, k_r)``."""
    if not 1 <= kappa <= geom.n * geom.p * geom.q:
        raise ValueError(f"bin {kappa} out of range")
    k = kappa - 1
    return k % geom.n + 1, (k // geom.n) % geom.p + 1, k // (geom.n * geom.p) + 1

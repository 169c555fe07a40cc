"""Point cloud container, Cartesian/spherical transforms and normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PointCloud:
    """Ordered 3D points with optional per-point colors and integer labels."""

    points: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        m = len(self.points)
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != m:
                raise ValueError(f"colors have {len(self.colors)} rows, expected {m}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != m:
                raise ValueError(f"labels have {len(self.labels)} entries, expected {m}")

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> PointCloud:
        return PointCloud(
            self.points[idx],
            None if self.colors is None else self.colors[idx],
            None if self.labels is None else self.labels[idx],
        )

    def with_points(self, points) -> PointCloud:
        return PointCloud(points, self.colors, self.labels)

    def features(self, mode: str = "xyz") -> np.ndarray:
        """Raw per-point input features: ``xyz`` (m x 3) or ``xyz-rgb`` (m x 6)."""
        if mode == "xyz":
            return self.points.copy()
        if mode == "xyz-rgb":
            if self.colors is None:
                raise ValueError("xyz-rgb features requested but cloud has no colors")
            return np.hstack([self.points, self.colors])
        raise ValueError(f"unknown feature mode {mode!r}")


def to_spherical(delta) -> np.ndarray:
    """Map Cartesian offsets to ``(theta, phi, r)`` along the last axis.

    ``theta = atan2(y, x)`` lies in [-pi, pi] and ``phi``, the elevation
    ``asin(z / r)``, lies in [-pi/2, pi/2]. The elevation is evaluated as
    ``atan2(z, hypot(x, y))``, which stays accurate near the poles. The zero
    vector maps to (0, 0, 0).
    """
    d = np.asarray(delta, dtype=np.float64) + 0.0  # canonicalize -0.0
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    horizontal = np.hypot(x, y)
    r = np.hypot(horizontal, z)
    theta = np.arctan2(y, x)
    phi = np.arctan2(z, horizontal)
    return np.stack([theta, phi, r], axis=-1)


def to_cartesian(sph) -> np.ndarray:
    s = np.asarray(sph, dtype=np.float64)
    theta, phi, r = s[..., 0], s[..., 1], s[..., 2]
    cp = np.cos(phi)
    return np.stack([r * cp * np.cos(theta), r * cp * np.sin(theta), r * np.sin(phi)], axis=-1)


@dataclass(frozen=True)
class NormalizeTransform:
    """``normalized = (original - shift) * scale`` with one isotropic scale."""

    shift: np.ndarray
    scale: float

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.shift) * self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.shift


def normalize_cloud(cloud: PointCloud, preserve_z_mean: bool = False):
    """Center a cloud on its centroid and scale it isotropically into [-1, 1]^3.

    With ``preserve_z_mean`` only x and y are centered, which keeps absolute
    height information (used for upright facade blocks).
    Returns the normalized cloud and the :class:`NormalizeTransform` applied.
    """
    if len(cloud) == 0:
        raise ValueError("empty input")
    pts = cloud.points
    shift = pts.mean(axis=0)
    if preserve_z_mean:
        shift[2] = 0.0
    centered = pts - shift
    extent = np.abs(centered).max()
    if extent == 0.0:
        # all points coincide with the shift: they already sit at the origin
        tf = NormalizeTransform(shift, 1.0)
    else:
        tf = NormalizeTransform(shift, 1.0 / extent)
    out = np.clip(tf.apply(pts), -1.0, 1.0)
    return cloud.with_points(out), tf

"""Point cloud files, manifests, datasets, synthetic shapes and block splitting.

Point file: one point per line, ``x y z [r g b] [label]``, ``#`` comments.
Three columns are xyz, four add a label, six add colors, seven add both.
Manifest: ``path<TAB>label`` (classification) or ``path<TAB>labelpath``
(segmentation, one integer per line); a path alone means the labels are
inline in the point file. Relative paths resolve against the manifest.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PointCloud, normalize_cloud

SHAPES = ("sphere", "cube", "torus")


class DataFormatError(ValueError):
    pass


def read_point_file(path) -> PointCloud:
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            arr = np.loadtxt(path, comments="#", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if arr.size == 0:
        raise DataFormatError(f"{path}: no points")
    ncol = arr.shape[1]
    if ncol not in (3, 4, 6, 7):
        raise DataFormatError(f"{path}: expected 3, 4, 6 or 7 columns, got {ncol}")
    if not np.all(np.isfinite(arr)):
        raise DataFormatError(f"{path}: non-finite values")
    colors = arr[:, 3:6] if ncol >= 6 else None
    if colors is not None and colors.max() > 1.0:
        colors = colors / 255.0
    labels = None
    if ncol in (4, 7):
        lab = arr[:, -1]
        if np.any(lab != np.round(lab)):
            raise DataFormatError(f"{path}: labels must be integers")
        labels = lab.astype(np.int64)
    return PointCloud(arr[:, :3], colors, labels)


def write_point_file(path, cloud: PointCloud, with_labels=True):
    cols = [cloud.points]
    fmt = ["%.17g"] * 3
    if cloud.colors is not None:
        cols.append(cloud.colors)
        fmt += ["%.17g"] * 3
    if with_labels and cloud.labels is not None:
        cols.append(cloud.labels[:, None].astype(np.float64))
        fmt.append("%d")
    np.savetxt(path, np.hstack(cols), fmt=fmt)


def read_label_file(path) -> np.ndarray:
    try:
        lab = np.loadtxt(path, comments="#", ndmin=1, dtype=np.int64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    return lab.reshape(-1)


def write_label_file(path, labels):
    np.savetxt(path, np.asarray(labels, dtype=np.int64), fmt="%d")


@dataclass
class Dataset:
    """Clouds with a class label each (classification) or per-point labels."""

    clouds: list
    labels: list | None = None
    split: str = "train"
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.clouds)

    @property
    def task(self) -> str:
        return "classification" if self.labels is not None else "segmentation"

    def num_classes(self) -> int:
        if self.labels is not None:
            return int(max(self.labels)) + 1
        return int(max(c.labels.max() for c in self.clouds)) + 1

    def normalized(self, preserve_z_mean=False) -> Dataset:
        clouds = [normalize_cloud(c, preserve_z_mean)[0] for c in self.clouds]
        return Dataset(clouds, self.labels, self.split, self.paths)


def read_manifest(path, split="train") -> Dataset:
    path = Path(path)
    base = path.parent
    clouds, labels, paths = [], [], []
    kinds = set()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) > 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'path<TAB>label'")
            cloud_path = base / parts[0]
            if not cloud_path.exists():
                raise FileNotFoundError(f"{path}:{lineno}: no such file {cloud_path}")
            cloud = read_point_file(cloud_path)
            if len(parts) == 1:
                if cloud.labels is None:
                    raise DataFormatError(f"{cloud_path}: no inline labels and no label file")
                kinds.add("seg")
            else:
                tag = parts[1].strip()
                try:
                    labels.append(int(tag))
                    kinds.add("cls")
                except ValueError:
                    lab_path = base / tag
                    if not lab_path.exists():
                        raise FileNotFoundError(f"{path}:{lineno}: no such file {lab_path}")
                    lab = read_label_file(lab_path)
                    if len(lab) != len(cloud):
                        raise DataFormatError(f"{lab_path}: {len(lab)} labels for {len(cloud)} points")
                    cloud = PointCloud(cloud.points, cloud.colors, lab)
                    kinds.add("seg")
            clouds.append(cloud)
            paths.append(str(cloud_path))
    if len(kinds) > 1:
        raise DataFormatError(f"{path}: mixes classification and segmentation entries")
    if not clouds:
        raise DataFormatError(f"{path}: empty manifest")
    return Dataset(clouds, labels if "cls" in kinds else None, split, paths)


def write_dataset(directory, dataset: Dataset, name=None) -> Path:
    """Write clouds and a manifest ``<name>.tsv``; returns the manifest path."""
    directory = Path(directory)
    name = name or dataset.split
    cloud_dir = directory / name
    cloud_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, cloud in enumerate(dataset.clouds):
        rel = f"{name}/{i:05d}.txt"
        if dataset.labels is not None:
            write_point_file(directory / rel, cloud, with_labels=False)
            lines.append(f"{rel}\t{dataset.labels[i]}")
        else:
            write_point_file(directory / rel, PointCloud(cloud.points, cloud.colors), with_labels=False)
            lab_rel = f"{name}/{i:05d}.labels"
            write_label_file(directory / lab_rel, cloud.labels)
            lines.append(f"{rel}\t{lab_rel}")
    manifest = directory / f"{name}.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# -- synthetic shapes ------------------------------------------------------

def sample_surface(shape: str, m: int, rng) -> np.ndarray:
    """Uniform samples on a unit-scale sphere, cube or torus surface."""
    if shape == "sphere":
        v = rng.standard_normal((m, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if shape == "cube":
        face = rng.integers(0, 6, m)
        p = rng.uniform(-1.0, 1.0, (m, 3))
        axis = face % 3
        p[np.arange(m), axis] = np.where(face < 3, -1.0, 1.0)
        return p
    if shape == "torus":
        major, minor = 1.0, 0.35
        out = np.empty((0, 3))
        while len(out) < m:
            u = rng.uniform(0, 2 * np.pi, 2 * m)
            v = rng.uniform(0, 2 * np.pi, 2 * m)
            # area element is proportional to the distance from the axis
            keep = rng.uniform(0, 1, 2 * m) < (major + minor * np.cos(v)) / (major + minor)
            u, v = u[keep], v[keep]
            ring = major + minor * np.cos(v)
            out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)])
        return out[:m]
    raise ValueError(f"unknown shape {shape!r}")


def _random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def make_synthetic_dataset(classes=SHAPES, n_per_class=10, points_per_cloud=512, seed=0,
                           task="classification", jitter=0.01, split="train") -> Dataset:
    """Randomly rotated, jittered surface samples of simple shapes.

    Classification: one shape per cloud, labelled by its index in ``classes``.
    Segmentation: every cloud is a scene holding one scaled copy of each
    shape at random positions; each point is labelled with its shape.
    """
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    if task == "classification":
        for _ in range(n_per_class):
            for k, shape in enumerate(classes):
                pts = sample_surface(shape, points_per_cloud, rng) @ _random_rotation(rng).T
                pts += rng.normal(0.0, jitter, pts.shape)
                clouds.append(PointCloud(pts))
                labels.append(k)
        order = rng.permutation(len(clouds))
        return Dataset([clouds[i] for i in order], [labels[i] for i in order], split)
    if task == "segmentation":
        for _ in range(n_per_class * len(classes)):
            counts = np.full(len(classes), points_per_cloud // len(classes))
            counts[: points_per_cloud - counts.sum()] += 1
            angle0 = rng.uniform(0, 2 * np.pi)
            parts, labs = [], []
            for k, shape in enumerate(classes):
                a = angle0 + 2 * np.pi * k / len(classes)
                center = np.array([np.cos(a), np.sin(a), rng.uniform(-0.3, 0.3)]) * 1.4
                pts = sample_surface(shape, counts[k], rng) @ _random_rotation(rng).T * 0.5 + center
                parts.append(pts + rng.normal(0.0, jitter, pts.shape))
                labs.append(np.full(counts[k], k))
            pts, lab = np.vstack(parts), np.concatenate(labs)
            order = rng.permutation(len(pts))
            clouds.append(PointCloud(pts[order], labels=lab[order]))
        return Dataset(clouds, None, split)
    raise ValueError(f"unknown task {task!r}")


# -- facade blocks -----------------------------------------------------------

def align_facade(cloud: PointCloud) -> PointCloud:
    """Rotate about the vertical axis so the dominant horizontal direction is x."""
    xy = cloud.points[:, :2] - cloud.points[:, :2].mean(axis=0)
    _, vecs = np.linalg.eigh(xy.T @ xy)
    major = vecs[:, -1]
    a = -np.arctan2(major[1], major[0])
    c, s = np.cos(a), np.sin(a)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return cloud.with_points(cloud.points @ rot.T)


def split_blocks(cloud: PointCloud, block_size=1.0, min_points=1, align=True):
    """Cut a large upright cloud into cubic blocks of ``block_size``.

    Within each block x and y are centered on their mean while z keeps the
    height above the lowest scene point, so absolute height survives. No
    rescaling is applied. Returns ``[(block index triple, cloud)]`` in
    lexicographic block order.
    """
    if len(cloud) == 0:
        raise ValueError("empty input")
    if align:
        cloud = align_facade(cloud)
    origin = cloud.points.min(axis=0)
    keys = np.floor((cloud.points - origin) / block_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    out = []
    for b, key in enumerate(uniq):
        idx = np.flatnonzero(inverse == b)
        if len(idx) < min_points:
            continue
        block = cloud.subset(idx)
        pts = block.points.copy()
        pts[:, :2] -= pts[:, :2].mean(axis=0)
        pts[:, 2] -= origin[2]
        out.append((tuple(int(k) for k in key), block.with_points(pts)))
    return out

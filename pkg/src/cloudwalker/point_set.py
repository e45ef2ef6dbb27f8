"""Point clouds: data model, XYZ/manifest ingestion, normalisation and
synthetic primitives."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus")

# torus radii (ring, tube) used by synth_shape
TORUS_RING = 1.0
TORUS_TUBE = 0.4


@dataclass
class PointCloud:
    points: np.ndarray
    id: str = ""
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"cloud {self.id!r}: points must have shape (n, 3), got {pts.shape}")
        if len(pts) == 0:
            raise DataError(f"cloud {self.id!r}: empty point set")
        if not np.all(np.isfinite(pts)):
            raise DataError(f"cloud {self.id!r}: non-finite coordinate")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class ScaleInfo:
    centroid: np.ndarray
    bbox_diagonal: float
    scale_factor: float


@dataclass
class LabeledDataset:
    entries: list = field(default_factory=list)  # (cloud id, path, class index)
    class_names: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def load_clouds(self) -> list:
        clouds = []
        for cid, path, label in self.entries:
            cloud = load_xyz(path)
            cloud.id = cid
            cloud.label = label
            clouds.append(cloud)
        return clouds


def load_xyz(path) -> PointCloud:
    """Read an ASCII XYZ file: three numbers per line, '#' comments and blank
    lines skipped."""
    path = Path(path)
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                xyz = [float(p) for p in parts]
            except ValueError:
                raise DataError(f"{path}:{lineno}: not a number in {line!r}") from None
            if not all(math.isfinite(v) for v in xyz):
                raise DataError(f"{path}:{lineno}: non-finite value")
            rows.append(xyz)
    if not rows:
        raise DataError(f"{path}: no points")
    return PointCloud(np.array(rows, dtype=np.float64), id=path.stem)


def save_xyz(cloud: PointCloud, path) -> None:
    # repr-precision floats so load_xyz(save_xyz(c)) is bit-exact
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in cloud.points.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def normalize(cloud: PointCloud) -> tuple[PointCloud, ScaleInfo]:
    """Center on the centroid and scale so the farthest point has norm 1.

    The axis-aligned bounding-box diagonal is measured before scaling; it is
    the only place the original size survives.
    """
    pts = cloud.points
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.sqrt((centered**2).sum(axis=1)).max())
    if not scale > 0.0:
        raise DataError(f"cloud {cloud.id!r}: degenerate cloud (all points identical)")
    bbox_diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    out = PointCloud(centered / scale, id=cloud.id, label=cloud.label)
    return out, ScaleInfo(centroid=centroid, bbox_diagonal=bbox_diag, scale_factor=scale)


def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts


def _cylinder(rng, n):
    # radius 1, z in [-1, 1]; side area 4*pi, each cap pi
    region = rng.choice(3, size=n, p=[4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0])
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-1.0, 1.0, size=n)
    rad = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    r = np.where(region == 0, 1.0, rad)
    z = np.where(region == 0, z, np.where(region == 1, 1.0, -1.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n):
    big, small = TORUS_RING, TORUS_TUBE
    out = []
    have = 0
    while have < n:
        m = 2 * (n - have) + 16
        u = rng.uniform(0.0, 2.0 * np.pi, size=m)
        v = rng.uniform(0.0, 2.0 * np.pi, size=m)
        # area element is proportional to (R + r cos v)
        keep = rng.uniform(0.0, big + small, size=m) < big + small * np.cos(v)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out.append(np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1))
        have += len(u)
    return np.concatenate(out)[:n]


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus}


def synth_shape(kind: str, n: int, seed: int) -> PointCloud:
    """Sample ``n`` points uniformly on the surface of a unit primitive."""
    if kind not in _SAMPLERS:
        raise DataError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n < 8:
        raise DataError(f"need at least 8 points, got {n}")
    rng = np.random.default_rng(seed)
    return PointCloud(_SAMPLERS[kind](rng, n), id=f"{kind}_{seed}")


def add_noise(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    """Gaussian jitter, used to build out-of-distribution shapes."""
    rng = np.random.default_rng(seed)
    pts = cloud.points + sigma * rng.standard_normal(cloud.points.shape)
    return PointCloud(pts, id=cloud.id, label=cloud.label)


def load_manifest(path, class_names: Optional[Sequence[str]] = None) -> LabeledDataset:
    """Read a ``path,label`` CSV.  Relative paths resolve against the
    manifest's directory.  Labels map to indices in order of first appearance,
    or to their position in ``class_names`` when given (so a test split can
    share the training split's numbering)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    ds = LabeledDataset(class_names=list(class_names or []))
    index = {name: i for i, name in enumerate(ds.class_names)}
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise DataError(f"{path}: header must be 'path,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns")
            rel, label = row[0].strip(), row[1].strip()
            full = (base / rel).resolve()
            if full in seen:
                raise DataError(f"{path}:{lineno}: duplicate cloud path {rel}")
            if not full.exists():
                raise DataError(f"{path}:{lineno}: missing file {rel}")
            seen.add(full)
            if label not in index:
                if class_names is not None:
                    raise DataError(f"{path}:{lineno}: unknown class {label!r}")
                index[label] = len(ds.class_names)
                ds.class_names.append(label)
            ds.entries.append((str(Path(rel).with_suffix("")), full, index[label]))
    return ds


def write_manifest(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for rel, label in rows:
            w.writerow([rel, label])

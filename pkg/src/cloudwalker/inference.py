"""Multi-walk prediction, aggregation and descriptor retrieval."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .neural_core import ModelParams, predict_proba
from .point_set import PointCloud, ScaleInfo
from .walker import PreparedShape, Walk, WalkParams, generate_walks

METHODS = ("majority", "mean", "max")


@dataclass
class ShapePrediction:
    cloud_id: str
    walk_probs: np.ndarray  # (m, C)
    final_class: int
    label: Optional[int] = None

    @property
    def walk_classes(self) -> np.ndarray:
        return self.walk_probs.argmax(axis=1)

    @property
    def descriptor(self) -> np.ndarray:
        return self.walk_probs.mean(axis=0)

    def with_method(self, method: str) -> "ShapePrediction":
        return ShapePrediction(self.cloud_id, self.walk_probs, aggregate(self.walk_probs, method), self.label)


def _bbox(params: ModelParams, scale: Optional[ScaleInfo], count: int):
    if not params.cfg.use_bbox:
        return None
    if scale is None:
        raise DataError("model uses the bounding-box feature but no scale info was given")
    return np.full(count, scale.bbox_diagonal)


def predict_walks(params: ModelParams, walks: Sequence[Walk], cloud: PointCloud,
                  scale_info: Optional[ScaleInfo] = None) -> np.ndarray:
    """Probability vectors ``(len(walks), C)`` for walks over one cloud."""
    if not walks:
        return np.empty((0, params.cfg.num_classes))
    lengths = {len(w) for w in walks}
    out = np.empty((len(walks), params.cfg.num_classes))
    for length in sorted(lengths):
        sel = [i for i, w in enumerate(walks) if len(w) == length]
        coords = np.stack([cloud.points[walks[i].indices] for i in sel])
        out[sel] = predict_proba(params, coords, _bbox(params, scale_info, len(sel)))
    return out


def predict_walk(params: ModelParams, walk: Walk, cloud: PointCloud,
                 scale_info: Optional[ScaleInfo] = None) -> np.ndarray:
    return predict_walks(params, [walk], cloud, scale_info)[0]


def aggregate(preds, method: str = "majority") -> int:
    """Combine per-walk probability vectors into one class.

    majority ties go to the larger summed probability, then the lower class.
    """
    P = np.asarray(preds, dtype=np.float64)
    if P.ndim != 2 or len(P) == 0:
        raise ValueError("need a non-empty (m, C) array of walk predictions")
    if method == "mean":
        return int(np.argmax(P.mean(axis=0)))
    if method == "max":
        return int(np.argmax(P.max(axis=0)))
    if method != "majority":
        raise ValueError(f"unknown aggregation method {method!r}")
    votes = np.bincount(P.argmax(axis=1), minlength=P.shape[1])
    tied = np.flatnonzero(votes == votes.max())
    if len(tied) == 1:
        return int(tied[0])
    sums = P.sum(axis=0)[tied]
    return int(tied[np.flatnonzero(sums == sums.max())[0]])


def classify_shape(params: ModelParams, shape: PreparedShape, m: int, walk_params: WalkParams,
                   method: str = "majority", seed: Optional[int] = None,
                   stream: tuple = ()) -> ShapePrediction:
    if m < 1:
        raise ValueError("need at least one walk")
    walks = generate_walks(shape.cloud, shape.tree, walk_params, m, seed=seed, stream=stream)
    probs = predict_walks(params, walks, shape.cloud, shape.scale)
    return ShapePrediction(shape.id, probs, aggregate(probs, method), shape.label)


def classify_dataset(params: ModelParams, shapes: Sequence[PreparedShape], m: int,
                     walk_params: WalkParams, method: str = "majority",
                     seed: Optional[int] = None) -> list:
    """Shape ``i`` draws its walks from sub-streams ``(seed, "infer", i, "walks", j)``."""
    return [classify_shape(params, s, m, walk_params, method, seed, stream=("infer", i))
            for i, s in enumerate(shapes)]


def retrieve(query, gallery: Sequence[tuple], top_k: Optional[int] = None) -> list:
    """Rank ``(id, descriptor, label)`` gallery entries by Euclidean distance to
    ``query``, ties by id.  Returns ``(id, distance, label)`` tuples."""
    q = np.asarray(query, dtype=np.float64)
    scored = []
    for gid, desc, label in gallery:
        d = np.asarray(desc, dtype=np.float64)
        if d.shape != q.shape:
            raise ValueError(f"descriptor width {d.shape} != query width {q.shape}")
        diff = d - q
        scored.append((float(np.sqrt(diff @ diff)), gid, label))
    scored.sort(key=lambda s: (s[0], s[1]))
    if top_k is not None:
        scored = scored[:top_k]
    return [(gid, dist, label) for dist, gid, label in scored]


def write_predictions(path, preds: Sequence[ShapePrediction]) -> None:
    """``cloud_id,final_class,walk_id,argmax,p_0..p_{C-1}``, one row per walk."""
    if not preds:
        raise ValueError("no predictions to write")
    C = preds[0].walk_probs.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cloud_id", "final_class", "walk_id", "argmax", *[f"p_{c}" for c in range(C)]])
        for p in preds:
            for j, row in enumerate(p.walk_probs):
                w.writerow([p.cloud_id, p.final_class, j, int(np.argmax(row)), *map(repr, row.tolist())])


def read_predictions(path) -> list:
    """Inverse of ``write_predictions``; labels are not stored and come back as None."""
    rows = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        C = len(header) - 4
        for r in reader:
            cid = r[0]
            if cid not in rows:
                rows[cid] = (int(r[1]), [])
                order.append(cid)
            rows[cid][1].append([float(x) for x in r[4:4 + C]])
    return [ShapePrediction(cid, np.array(rows[cid][1]), rows[cid][0]) for cid in order]

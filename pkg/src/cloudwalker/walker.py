"""Random walks over point clouds.

A walk starts at a uniformly random point and repeatedly steps to an
unvisited member of the current point's k nearest neighbours.  When every
neighbour has been visited the walk teleports to a uniformly random unvisited
point and records the position.

Strategies for picking among the unvisited neighbours:

``random``
    uniform choice.
``high_variance``
    the neighbour that maximises the trace of the coordinate covariance of the
    walk so far plus that neighbour; ties go to the lower point index.
``combined``
    high-variance with probability ``combined_variance_prob``, uniform
    otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DataError
from .point_set import PointCloud, ScaleInfo, normalize
from .seeding import substream
from .spatial_index import KdTree

STRATEGIES = ("random", "high_variance", "combined")


@dataclass(frozen=True)
class WalkParams:
    length: Optional[int] = None
    fraction: Optional[float] = None
    k: int = 20
    strategy: str = "random"
    combined_variance_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if (self.length is None) == (self.fraction is None):
            raise ValueError("set exactly one of length and fraction")
        if self.length is not None and self.length < 1:
            raise ValueError(f"walk length must be >= 1, got {self.length}")
        if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"walk fraction must be in (0, 1], got {self.fraction}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.combined_variance_prob <= 1.0:
            raise ValueError("combined_variance_prob must be in [0, 1]")

    def length_for(self, n: int) -> int:
        if self.length is not None:
            return self.length
        return int(min(max(round(self.fraction * n), 1), n))


@dataclass
class Walk:
    cloud_id: str
    indices: np.ndarray
    teleport_positions: frozenset = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.indices)

    def to_line(self) -> str:
        return " ".join([self.cloud_id, *map(str, self.indices.tolist())])


def _spread_scores(s1: np.ndarray, s2: float, count: int, cand: np.ndarray) -> np.ndarray:
    # trace of the (population) covariance after appending each candidate
    c = count + 1
    mean = (s1[None, :] + cand) / c
    return (s2 + (cand * cand).sum(axis=1)) / c - (mean * mean).sum(axis=1)


def _pick_max(scores: np.ndarray, ids) -> int:
    best = scores.max()
    return min(i for i, s in zip(ids, scores.tolist()) if s == best)


def high_variance_step(walk_points, candidate_points, candidate_ids=None) -> int:
    """Return the candidate id whose addition maximises the trace of the
    coordinate covariance of the walk.  ``candidate_ids`` defaults to the
    candidate positions 0..c-1."""
    cand = np.asarray(candidate_points, dtype=np.float64).reshape(-1, 3)
    if len(cand) == 0:
        raise ValueError("empty candidate set")
    walk = np.asarray(walk_points, dtype=np.float64).reshape(-1, 3)
    ids = list(range(len(cand))) if candidate_ids is None else [int(i) for i in candidate_ids]
    scores = _spread_scores(walk.sum(axis=0), float((walk * walk).sum()), len(walk), cand)
    return _pick_max(scores, ids)


def generate_walk(cloud: PointCloud, tree: KdTree, params: WalkParams, rng: np.random.Generator) -> Walk:
    pts = cloud.points
    n = len(pts)
    length = params.length_for(n)
    if length > n:
        raise DataError(f"cloud {cloud.id!r}: walk longer than cloud ({length} > {n})")
    k = min(params.k, n - 1)
    table = tree.knn_lists(k) if k > 0 else [[] for _ in range(n)]
    strategy = params.strategy
    p_var = params.combined_variance_prob

    origin = int(rng.integers(n))
    # one row of uniforms per step: [neighbour choice, strategy coin, teleport]
    draws = rng.random((length, 3)).tolist()

    visited = bytearray(n)
    visited[origin] = 1
    walk = [origin]
    teleports = []
    track = strategy != "random"
    if track:
        s1 = pts[origin].copy()
        s2 = float(pts[origin] @ pts[origin])
    cur = origin
    for t in range(1, length):
        u_pick, u_coin, u_tele = draws[t]
        cands = [j for j in table[cur] if not visited[j]]
        if not cands:
            unvisited = [j for j in range(n) if not visited[j]]
            nxt = unvisited[min(int(u_tele * len(unvisited)), len(unvisited) - 1)]
            teleports.append(t)
        elif strategy == "random" or (strategy == "combined" and u_coin >= p_var):
            nxt = cands[min(int(u_pick * len(cands)), len(cands) - 1)]
        else:
            nxt = _pick_max(_spread_scores(s1, s2, t, pts[cands]), cands)
        visited[nxt] = 1
        walk.append(nxt)
        if track:
            s1 += pts[nxt]
            s2 += float(pts[nxt] @ pts[nxt])
        cur = nxt
    return Walk(cloud.id, np.array(walk, dtype=np.int64), frozenset(teleports))


def generate_walks(cloud: PointCloud, tree: KdTree, params: WalkParams, m: int, seed=None,
                   stream: tuple = ()) -> list:
    """``m`` walks; walk ``j`` uses sub-stream ``(seed, *stream, "walks", j)``
    so any walk can be regenerated on its own."""
    seed = params.seed if seed is None else seed
    return [generate_walk(cloud, tree, params, substream(seed, *stream, "walks", j)) for j in range(m)]


def check_walk(walk: Walk, table: np.ndarray) -> None:
    """Raise AssertionError unless the walk has no repeats and every
    non-teleport step lies in its predecessor's neighbour list."""
    idx = walk.indices.tolist()
    assert len(set(idx)) == len(idx), "repeated index in walk"
    for t in range(1, len(idx)):
        if t not in walk.teleport_positions:
            assert idx[t] in table[idx[t - 1]], f"step {t} leaves the k-NN set"


def write_walks(path, walks: Iterable[Walk]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w in walks:
            fh.write(w.to_line() + "\n")


def read_walks(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                idx = np.array([int(p) for p in parts[1:]], dtype=np.int64)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad walk index") from None
            out.append(Walk(parts[0], idx))
    return out


@dataclass
class PreparedShape:
    """A normalised cloud with its KD-tree and pre-normalisation scale."""

    cloud: PointCloud
    tree: KdTree
    scale: ScaleInfo
    label: Optional[int] = None

    @property
    def id(self) -> str:
        return self.cloud.id


def prepare_shape(cloud: PointCloud, label: Optional[int] = None) -> PreparedShape:
    normed, scale = normalize(cloud)
    lab = cloud.label if label is None else label
    normed.label = lab
    return PreparedShape(normed, KdTree(normed), scale, lab)

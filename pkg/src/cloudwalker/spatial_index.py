"""Exact k-nearest-neighbour search over a point cloud with a KD-tree.

Nodes split at the median of the widest-spread axis until they hold at most
``LEAF_SIZE`` points.  Queries exclude the query point itself and return
neighbours sorted by (squared distance, index), so equal distances resolve
to the lower index.

Queries run one leaf at a time: the points of a leaf share a search radius
taken from a small ancestor, every leaf whose box lies within that radius is
collected by descending the tree, and the candidates are ranked exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .point_set import PointCloud

LEAF_SIZE = 16


def sq_dists(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, summed x, y, z in that order."""
    d = points - query
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


class KdTree:
    """Node arrays over a cloud.  Node ``i`` owns ``perm[start[i]:stop[i]]``;
    internal nodes have ``left``/``right`` children, leaves have -1."""

    def __init__(self, cloud: PointCloud, leaf_size: int = LEAF_SIZE):
        self.cloud_id = cloud.id
        self.points = cloud.points
        self.leaf_size = leaf_size
        n = len(self.points)
        self.perm = np.arange(n)
        self.start, self.stop, self.axis, self.split = [], [], [], []
        self.left, self.right, self.parent = [], [], []
        self._build(0, n, -1)
        self.start = np.array(self.start)
        self.stop = np.array(self.stop)
        self.axis = np.array(self.axis)
        self.split = np.array(self.split, dtype=np.float64)
        self.left = np.array(self.left)
        self.right = np.array(self.right)
        self.parent = np.array(self.parent)
        lo, hi = [], []
        for s, e in zip(self.start, self.stop):
            pts = self.points[self.perm[s:e]]
            lo.append(pts.min(axis=0))
            hi.append(pts.max(axis=0))
        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self.leaves = np.flatnonzero(self.left < 0)
        self._leaf_lo = self.lo[self.leaves]
        self._leaf_hi = self.hi[self.leaves]
        self._tables = {}

    def __len__(self) -> int:
        return len(self.points)

    def _build(self, s: int, e: int, parent: int) -> int:
        node = len(self.start)
        self.start.append(s)
        self.stop.append(e)
        self.parent.append(parent)
        self.left.append(-1)
        self.right.append(-1)
        self.axis.append(-1)
        self.split.append(np.nan)
        if e - s <= self.leaf_size:
            return node
        idx = self.perm[s:e]
        pts = self.points[idx]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        # stable sort keeps construction deterministic under coordinate ties
        order = np.lexsort((idx, pts[:, axis]))
        self.perm[s:e] = idx[order]
        mid = s + (e - s) // 2
        self.axis[node] = axis
        self.split[node] = float(self.points[self.perm[mid], axis])
        self.left[node] = self._build(s, mid, node)
        self.right[node] = self._build(mid, e, node)
        return node

    def leaf_indices(self, leaf: int) -> np.ndarray:
        return self.perm[self.start[leaf]:self.stop[leaf]]

    def _collect(self, qlo: np.ndarray, qhi: np.ndarray, r2: float) -> np.ndarray:
        # leaves partition the points, so testing every leaf box at once
        # replaces a descent through the internal nodes
        gap = np.maximum(np.maximum(self._leaf_lo - qhi, qlo - self._leaf_hi), 0.0)
        near = np.flatnonzero((gap * gap).sum(axis=1) <= r2)
        return np.concatenate([self.perm[self.start[f]:self.stop[f]] for f in self.leaves[near]])

    def _query_block(self, queries: np.ndarray, leaf: int, k: int) -> np.ndarray:
        """k nearest neighbours (self excluded) for query indices held by ``leaf``."""
        node = leaf
        while self.stop[node] - self.start[node] < k + 1 and self.parent[node] >= 0:
            node = self.parent[node]
        seed = self.perm[self.start[node]:self.stop[node]]
        qpts = self.points[queries]
        d0 = sq_dists(self.points[seed][None, :, :], qpts[:, None, :])
        d0[seed[None, :] == queries[:, None]] = np.inf
        r2 = float(np.partition(d0, k - 1, axis=1)[:, k - 1].max())
        # tiny slack so boxes touching the radius are never pruned by rounding
        r2 = r2 * (1.0 + 1e-12) + 1e-300
        cand = np.sort(self._collect(qpts.min(axis=0), qpts.max(axis=0), r2))
        d = sq_dists(self.points[cand][None, :, :], qpts[:, None, :])
        d[cand[None, :] == queries[:, None]] = np.inf
        # keep every candidate up to the k-th distance (ties included), then
        # order that short list by (distance, index)
        kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
        width = int((d <= kth).sum(axis=1).max())
        if width < d.shape[1]:
            sub = np.argpartition(d, width - 1, axis=1)[:, :width]
        else:
            sub = np.broadcast_to(np.arange(width), d.shape)
        ids = cand[sub]
        order = np.lexsort((ids, np.take_along_axis(d, sub, axis=1)), axis=1)[:, :k]
        return np.take_along_axis(ids, order, axis=1)

    def knn(self, query_index: int, k: int) -> np.ndarray:
        n = len(self.points)
        if not 0 <= query_index < n:
            raise IndexError(f"query index {query_index} out of range for {n} points")
        _check_k(k, n)
        leaf = self._leaf_of(query_index)
        return self._query_block(np.array([query_index]), leaf, k)[0]

    def knn_table(self, k: int) -> np.ndarray:
        """(n, k) array: row i lists the k nearest neighbours of point i.  Cached."""
        if k in self._tables:
            return self._tables[k]
        n = len(self.points)
        _check_k(k, n)
        table = np.empty((n, k), dtype=np.int64)
        for leaf in self.leaves:
            q = self.leaf_indices(leaf)
            table[q] = self._query_block(q, leaf, k)
        table.setflags(write=False)
        self._tables[k] = table
        return table

    def knn_lists(self, k: int) -> list:
        """``knn_table(k)`` as nested Python lists, for tight per-step loops."""
        key = ("lists", k)
        if key not in self._tables:
            self._tables[key] = self.knn_table(k).tolist()
        return self._tables[key]

    def _leaf_of(self, index: int) -> int:
        pos = int(np.flatnonzero(self.perm == index)[0])
        node = 0
        while self.left[node] >= 0:
            node = self.left[node] if pos < self.stop[self.left[node]] else self.right[node]
        return node


def _check_k(k: int, n: int) -> None:
    if k < 1:
        raise DataError(f"k must be positive, got {k}")
    if k > n - 1:
        raise DataError(f"k={k} exceeds the {n - 1} available neighbours")


def build(cloud: PointCloud, leaf_size: int = LEAF_SIZE) -> KdTree:
    return KdTree(cloud, leaf_size=leaf_size)


def knn(tree: KdTree, query_index: int, k: int) -> np.ndarray:
    return tree.knn(query_index, k)

"""Classification and retrieval metrics, and the shape-complexity indicator."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .inference import retrieve


def instance_accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if len(p) == 0 or len(p) != len(y):
        raise ValueError("need equal-length, non-empty predictions and labels")
    return float(np.count_nonzero(p == y) / len(y))


def class_accuracy(predictions, labels, num_classes: int) -> float:
    """Mean over classes of the per-class instance accuracy."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if len(p) == 0 or len(p) != len(y):
        raise ValueError("need equal-length, non-empty predictions and labels")
    if np.any((y < 0) | (y >= num_classes)):
        raise ValueError("label outside [0, C)")
    accs = []
    for c in range(num_classes):
        sel = y == c
        if not sel.any():
            raise ValueError(f"class {c} has no instances; per-class accuracy undefined")
        accs.append(np.count_nonzero(p[sel] == c) / np.count_nonzero(sel))
    return float(sum(accs) / num_classes)


def average_precision(ranked_relevance, gtp: int) -> float:
    """(1/GTP) * sum_k P@k * rel@k over a ranked list of 0/1 relevance bits."""
    if gtp < 1:
        raise ValueError("GTP must be at least 1")
    total = 0.0
    hits = 0
    for k, rel in enumerate(ranked_relevance, start=1):
        if rel:
            hits += 1
            total += hits / k
    return total / gtp


def mean_average_precision(queries) -> float:
    """Mean AP over queries given as ``(ranked_relevance, gtp)`` pairs."""
    aps = [average_precision(rel, gtp) for rel, gtp in queries]
    if not aps:
        raise ValueError("no queries")
    return float(sum(aps) / len(aps))


@dataclass
class RetrievalResult:
    mAP: float
    aps: list
    rankings: dict  # query id -> [(gallery id, distance, relevant)]


def evaluate_retrieval(ids: Sequence[str], descriptors, labels) -> RetrievalResult:
    """Every item queries all the others; relevant means same label."""
    desc = np.asarray(descriptors, dtype=np.float64)
    entries = [(ids[i], desc[i], labels[i]) for i in range(len(ids))]
    queries, rankings, aps = [], {}, []
    for i, (qid, qd, ql) in enumerate(entries):
        ranked = retrieve(qd, entries[:i] + entries[i + 1:])
        rel = [int(lab == ql) for _, _, lab in ranked]
        gtp = sum(rel)
        rankings[qid] = [(gid, d, r) for (gid, d, _), r in zip(ranked, rel)]
        if gtp == 0:
            continue  # no relevant item anywhere; AP undefined
        queries.append((rel, gtp))
        aps.append(average_precision(rel, gtp))
    return RetrievalResult(mean_average_precision(queries), aps, rankings)


def write_rankings(path, rankings: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "rank", "gallery_id", "distance", "relevant"])
        for qid, ranked in rankings.items():
            for rank, (gid, d, rel) in enumerate(ranked, start=1):
                w.writerow([qid, rank, gid, repr(d), rel])


# ------------------------------------------------------------- complexity

@dataclass(frozen=True)
class ComplexityStats:
    cloud_id: str
    var_cw: float
    ce_mean: float
    correct: bool


@dataclass(frozen=True)
class IndicatorLine:
    a: float
    b: float
    imbalance: int = 0


def cross_walk_variance(probs) -> float:
    """L2 norm of the per-class variance of the walk probability vectors."""
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim != 2 or len(P) == 0:
        raise ValueError("need a non-empty (m, C) array")
    dev = P - P.mean(axis=0)
    v = (dev * dev).mean(axis=0)
    return float(np.sqrt(v @ v))


def walk_entropy(prob) -> float:
    """-ln of the top-class probability: 0 for a one-hot vector."""
    p = np.asarray(prob, dtype=np.float64)
    return float(-np.log(p.max()))


def complexity_stats(cloud_id: str, probs, label: int, final_class: int) -> ComplexityStats:
    P = np.asarray(probs, dtype=np.float64)
    ce = float(np.mean([walk_entropy(row) for row in P]))
    return ComplexityStats(cloud_id, cross_walk_variance(P), ce, bool(final_class == label))


def _grid(stats: Sequence[ComplexityStats], size: int):
    var = np.array([s.var_cw for s in stats])
    ce = np.array([s.ce_mean for s in stats])
    ok = (ce > 0) & (var > 0)
    if ok.any():
        ratios = var[ok] / ce[ok]
        lo, hi = ratios.min(), ratios.max()
    else:
        lo, hi = 1.0, 1.0
    if lo == hi:
        lo, hi = lo / 10.0, hi * 10.0
    slopes = np.geomspace(lo, hi, size)
    intercepts = np.linspace(var.min(), var.max(), size)
    return slopes, intercepts


def fit_indicator_line(stats: Sequence[ComplexityStats], grid_size: int = 64) -> IndicatorLine:
    """Grid-search the line var = a * ce + b above which correctly and wrongly
    classified training shapes are as balanced as possible.

    Only lines with at least one misclassified shape above them compete (an
    empty region is trivially balanced); ties prefer fewer shapes above, then
    grid order.  If no grid line isolates any misclassified shape, the best
    unconstrained line is returned.
    """
    correct = np.array([s.correct for s in stats], dtype=bool)
    if correct.all() or not correct.any():
        raise ValueError("degenerate training stats: need both correct and incorrect shapes")
    var = np.array([s.var_cw for s in stats])
    ce = np.array([s.ce_mean for s in stats])
    slopes, intercepts = _grid(stats, grid_size)
    # above[i, j, s]: shape s lies strictly above line (slopes[i], intercepts[j])
    above = var[None, None, :] > slopes[:, None, None] * ce[None, None, :] + intercepts[None, :, None]
    n_ok = (above & correct).sum(axis=2)
    n_bad = (above & ~correct).sum(axis=2)
    imbalance = np.abs(n_ok - n_bad)
    total = n_ok + n_bad
    key = imbalance * (len(stats) + 1) + total
    valid = n_bad > 0
    pool = np.where(valid, key, np.iinfo(np.int64).max) if valid.any() else key
    i, j = np.unravel_index(int(np.argmin(pool)), pool.shape)
    return IndicatorLine(float(slopes[i]), float(intercepts[j]), int(imbalance[i, j]))


def complexity_indicator(stats: ComplexityStats, line: IndicatorLine) -> int:
    return int(stats.var_cw > line.a * stats.ce_mean + line.b)


def write_complexity(path, stats: Sequence[ComplexityStats], line: IndicatorLine) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cloud_id", "var_cw", "ce_mean", "correct", "f"])
        for s in stats:
            w.writerow([s.cloud_id, repr(s.var_cw), repr(s.ce_mean), int(s.correct),
                        complexity_indicator(s, line)])

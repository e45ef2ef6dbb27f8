import itertools

import numpy as np
import pytest
from conftest import brute_knn
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from cloudwalker.errors import DataError
from cloudwalker.point_set import PointCloud, synth_shape
from cloudwalker.seeding import substream
from cloudwalker.spatial_index import build
from cloudwalker.walker import (Walk, WalkParams, check_walk, generate_walk, generate_walks,
                                high_variance_step, read_walks, write_walks)


def oracle_table(points, k):
    return [brute_knn(points, q, k) for q in range(len(points))]


def test_single_point_walk(rng):
    c = PointCloud(rng.normal(size=(10, 3)))
    w = generate_walk(c, build(c), WalkParams(length=1, k=3), substream(0))
    assert len(w) == 1 and not w.teleport_positions


def test_three_collinear_points_all_outcomes():
    c = PointCloud([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    t = build(c)
    table = oracle_table(c.points, 2)
    seen = set()
    for seed in range(300):
        w = generate_walk(c, t, WalkParams(length=3, k=2), substream(seed))
        check_walk(w, table)
        seen.add(tuple(w.indices.tolist()))
    # with k = n - 1 every unvisited point is a neighbour, so no teleports and
    # every permutation is reachable
    assert seen == set(itertools.permutations(range(3)))


def test_full_length_walk_covers_cloud(rng):
    c = PointCloud(rng.normal(size=(50, 3)))
    w = generate_walk(c, build(c), WalkParams(length=50, k=4), substream(1))
    assert sorted(w.indices.tolist()) == list(range(50))
    check_walk(w, oracle_table(c.points, 4))


def test_walk_longer_than_cloud():
    c = PointCloud(np.eye(3))
    with pytest.raises(DataError, match="longer than cloud"):
        generate_walk(c, build(c), WalkParams(length=4, k=1), substream(0))


def test_generate_walks_counts_and_determinism():
    c = synth_shape("sphere", 200, 0)
    t = build(c)
    p = WalkParams(length=50, k=8, seed=1)
    assert generate_walks(c, t, p, 0) == []
    a, b = generate_walks(c, t, p, 4), generate_walks(c, t, p, 4)
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))
    # walk j is reproducible on its own
    single = generate_walk(c, t, p, substream(1, "walks", 2))
    np.testing.assert_array_equal(single.indices, a[2].indices)


def test_coverage_of_many_walks():
    c = synth_shape("cube", 1000, 3)
    t = build(c)
    walks = generate_walks(c, t, WalkParams(length=400, k=20, seed=9), 48)
    table = t.knn_table(20)
    for w in walks:
        check_walk(w, table)
    assert len(set(np.concatenate([w.indices for w in walks]).tolist())) >= 400


def test_fraction_length():
    p = WalkParams(fraction=0.4)
    assert p.length_for(512) == 205
    assert WalkParams(fraction=0.001).length_for(10) == 1
    with pytest.raises(ValueError):
        WalkParams(length=10, fraction=0.4)


def test_high_variance_examples():
    assert high_variance_step([[0, 0, 0]], [[1, 0, 0], [5, 0, 0]], [3, 7]) == 7
    assert high_variance_step([[0, 0, 0]], [[2, 2, 2]], [11]) == 11
    assert high_variance_step([[0, 0, 0]], [[1, 0, 0], [-1, 0, 0]], [9, 4]) == 4
    with pytest.raises(ValueError):
        high_variance_step([[0, 0, 0]], np.empty((0, 3)))


def test_high_variance_matches_direct_trace(rng):
    walk = rng.normal(size=(7, 3))
    cand = rng.normal(size=(5, 3))
    traces = [np.trace(np.cov(np.vstack([walk, c]).T, bias=True)) for c in cand]
    assert high_variance_step(walk, cand) == int(np.argmax(traces))


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 120), st.integers(1, 12), st.sampled_from(["random", "high_variance", "combined"]),
       st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_walk_invariants_property(n, k, strategy, seed, frac):
    r = np.random.default_rng(seed)
    pts = r.integers(0, 3, size=(n, 3)).astype(float) + r.normal(scale=0.01, size=(n, 3)) * (seed % 2)
    c = PointCloud(pts)
    k = min(k, n - 1)
    p = WalkParams(fraction=frac, k=k, strategy=strategy)
    w = generate_walk(c, build(c), p, substream(seed))
    assert len(w) == p.length_for(n)
    check_walk(w, oracle_table(pts, k))


def test_random_strategy_uniform_on_star():
    pts = [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]]
    c = PointCloud(pts)
    t = build(c)
    p = WalkParams(length=2, k=4)
    counts = np.zeros(5, dtype=int)
    steps = 0
    seed = 0
    while steps < 10_000:
        w = generate_walk(c, t, p, substream(2024, seed))
        seed += 1
        if w.indices[0] == 0:
            counts[w.indices[1]] += 1
            steps += 1
    assert counts[0] == 0
    assert chisquare(counts[1:]).pvalue > 0.01


@pytest.mark.parametrize("prob, twin", [(0.0, "random"), (1.0, "high_variance")])
def test_combined_extremes(prob, twin):
    c = synth_shape("torus", 300, 2)
    t = build(c)
    for s in range(10):
        a = generate_walk(c, t, WalkParams(length=120, k=10, strategy="combined",
                                           combined_variance_prob=prob), substream(s))
        b = generate_walk(c, t, WalkParams(length=120, k=10, strategy=twin), substream(s))
        np.testing.assert_array_equal(a.indices, b.indices)


def test_walk_file_roundtrip(tmp_path):
    walks = [Walk("a", np.array([3, 1, 2])), Walk("b", np.array([0]))]
    write_walks(tmp_path / "w.txt", walks)
    assert (tmp_path / "w.txt").read_text() == "a 3 1 2\nb 0\n"
    back = read_walks(tmp_path / "w.txt")
    assert [w.cloud_id for w in back] == ["a", "b"]
    np.testing.assert_array_equal(back[0].indices, [3, 1, 2])

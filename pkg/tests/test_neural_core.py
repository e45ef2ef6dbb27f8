import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cloudwalker import neural_core as nc
from cloudwalker.errors import DataError
from cloudwalker.neural_core import (ModelConfig, classify_head, cross_entropy_loss, gru_forward,
                                     gru_layer, init_params, load_checkpoint, loss_and_grad,
                                     num_params, point_embed, save_checkpoint, softmax, zero_params)

TINY = ModelConfig(widths=(4, 6, 8), hidden=8, num_classes=3)


def _perturb(params, rng):
    for name, arr in params.items():
        if name.endswith((".b", "beta")):
            arr[...] = rng.normal(0, 0.3, arr.shape)
        elif name.endswith("gamma"):
            arr[...] = 1 + rng.normal(0, 0.3, arr.shape)
    return params


def fd_max_rel_error(params, coords, targets, bbox=None, step=1e-5):
    """Central differences over every parameter entry."""
    _, grads = loss_and_grad(params, coords, targets, bbox)
    worst = 0.0
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            lp = nc.batch_loss(params, coords, targets, bbox)
            arr[idx] = old - step
            lm = nc.batch_loss(params, coords, targets, bbox)
            arr[idx] = old
            num = (lp - lm) / (2 * step)
            a = grads[name][idx]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    return worst


# ------------------------------------------------------------- point MLP

def test_constant_walk_gives_relu_beta(rng):
    p = _perturb(init_params(TINY, rng), rng)
    out = point_embed(p, np.tile([[0.3, -0.2, 0.5]], (6, 1)))
    np.testing.assert_array_equal(out, np.tile(np.maximum(p["mlp.2.beta"], 0.0), (6, 1)))


def test_two_point_normalisation_symmetry(rng):
    p = init_params(TINY, rng)
    _, caches = nc._mlp_forward(p, rng.normal(size=(1, 2, 3)))
    for _, xhat, _, y in caches:
        np.testing.assert_allclose(y[0].mean(axis=0), 0.0, atol=1e-15)
        np.testing.assert_allclose(y[0, 0], -y[0, 1], rtol=0, atol=1e-15)


def test_normalisation_removes_input_scale(rng):
    p = init_params(TINY, rng)
    for i in range(3):
        p[f"mlp.{i}.b"] = 0.0
    x = rng.normal(scale=10.0, size=(1, 9, 3))
    _, c1 = nc._mlp_forward(p, x)
    _, c2 = nc._mlp_forward(p, 2 * x)
    a1 = x @ p["mlp.0.W"]
    assert not np.allclose(a1, 2 * x @ p["mlp.0.W"])
    # eps = 1e-5 against variances of order 100 leaves ~1e-7 relative drift
    np.testing.assert_allclose(c1[0][1], c2[0][1], rtol=1e-6, atol=1e-9)


def test_point_embed_sequence_equivariance(rng):
    p = _perturb(init_params(TINY, rng), rng)
    x = rng.normal(size=(11, 3))
    perm = rng.permutation(11)
    np.testing.assert_allclose(point_embed(p, x[perm]), point_embed(p, x)[perm], rtol=1e-12, atol=1e-14)


# ------------------------------------------------------------- GRU

def test_gru_zero_weights_stay_zero(rng):
    p = zero_params(TINY)
    feats = rng.normal(size=(7, TINY.feature_width))
    np.testing.assert_array_equal(gru_forward(p, feats), np.zeros(8))


def test_gru_zero_weights_halve_initial_state():
    c = np.linspace(-1, 1, 8)
    hs, _ = gru_layer(np.zeros((3, 24)), np.zeros((8, 24)), np.zeros(24), np.zeros((5, 1, 3)), h0=c)
    for t in range(5):
        np.testing.assert_allclose(hs[t, 0], c * 0.5 ** (t + 1), rtol=1e-15)
    p = zero_params(TINY)
    out = gru_forward(p, np.zeros((5, TINY.feature_width)), h0=c)
    np.testing.assert_allclose(out, c * 0.5 ** 5, rtol=1e-15)


def test_gru_hand_evaluated_step():
    hs, _ = gru_layer(np.ones((1, 3)), np.ones((1, 3)), np.zeros(3), np.zeros((1, 1, 1)), h0=[1.0])
    z = 1 / (1 + math.exp(-1))
    cand = math.tanh(z * 1.0)
    expected = (1 - z) * 1.0 + z * cand
    assert hs[0, 0, 0] == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.7247, abs=5e-4)


# ------------------------------------------------------------- head, softmax, loss

def test_head_zero_weights_give_bias():
    p = zero_params(TINY)
    p["head.b"] = [1.0, -2.0, 0.5]
    np.testing.assert_array_equal(classify_head(p, np.ones(8)), [1.0, -2.0, 0.5])


def test_head_identity_and_bbox():
    cfg = ModelConfig(widths=(2, 2, 2), hidden=2, num_classes=2, use_bbox=True)
    p = zero_params(cfg)
    p["head.W"] = [[1, 0], [0, 1], [1, 0]]
    np.testing.assert_array_equal(classify_head(p, [3.0, 1.0], 0.0), [3.0, 1.0])
    np.testing.assert_array_equal(classify_head(p, [3.0, 1.0], 2.5), [5.5, 1.0])
    with pytest.raises(DataError):
        classify_head(p, [3.0, 1.0])
    with pytest.raises(DataError):
        classify_head(zero_params(TINY), np.ones(8), 1.0)


def test_softmax_examples():
    np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-15)
    p = softmax([1000.0, 0.0])
    assert p[0] == 1.0 and 0.0 <= p[1] < 1e-300 and np.all(np.isfinite(p))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.randoms(use_true_random=False))
def test_softmax_properties(x, r):
    p = softmax(x)
    assert abs(p.sum() - 1.0) <= 1e-12 and np.all(p > 0)
    perm = list(range(len(x)))
    r.shuffle(perm)
    np.testing.assert_allclose(softmax(x[perm]), p[perm], rtol=1e-14, atol=0)
    np.testing.assert_allclose(softmax(x + 3.7), p, rtol=1e-12, atol=1e-15)


def test_cross_entropy_examples():
    assert cross_entropy_loss([1.0, 0.0], 0) == 0.0
    assert cross_entropy_loss([0.5, 0.5], 1) == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy_loss([0.25] * 4, 2) == pytest.approx(math.log(4), abs=1e-15)
    assert cross_entropy_loss([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(IndexError):
        cross_entropy_loss([0.5, 0.5], 2)


# ------------------------------------------------------------- backward

def test_zero_gradient_at_certain_prediction(rng):
    p = init_params(TINY, rng)
    p["head.b"] = [1000.0, 0.0, 0.0]
    loss, grads = loss_and_grad(p, rng.normal(size=(2, 5, 3)), [0, 0])
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_head_gradient_identity(rng):
    p = _perturb(init_params(TINY, rng), rng)
    x = rng.normal(size=(3, 5, 3))
    t = np.array([0, 2, 1])
    logits, cache = nc.forward(p, x, keep_cache=True)
    _, grads = nc.backward(p, cache, t)
    onehot = np.eye(3)[t]
    np.testing.assert_allclose(grads["head.W"], cache.head_in.T @ (softmax(logits) - onehot) / 3, rtol=1e-13)
    np.testing.assert_allclose(grads["head.b"], (softmax(logits) - onehot).mean(axis=0), rtol=1e-13)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(widths=(4, 6, 8), hidden=8, num_classes=3, use_bbox=bool(seed % 2))
    p = _perturb(init_params(cfg, rng), rng)
    x = rng.normal(size=(2, 5, 3))
    bbox = rng.uniform(0.5, 2.0, 2) if cfg.use_bbox else None
    assert fd_max_rel_error(p, x, rng.integers(0, 3, 2), bbox) < 1e-4


def test_gradients_without_affine(rng):
    cfg = ModelConfig(widths=(3, 4, 5), hidden=4, num_classes=2, affine=False)
    p = init_params(cfg, rng)
    assert "mlp.0.gamma" not in p.tensors
    assert fd_max_rel_error(p, rng.normal(size=(1, 4, 3)), [1]) < 1e-4


def test_forward_deterministic(rng):
    p = init_params(TINY, rng)
    x = rng.normal(size=(4, 9, 3))
    assert nc.forward(p, x).tobytes() == nc.forward(p, x).tobytes()


def test_param_count_is_function_of_config():
    d1, d2, d3, h, C = 4, 6, 8, 8, 3
    D = d3 + 3
    expected = (3 * d1 + 3 * d1) + (d1 * d2 + 3 * d2) + (d2 * d3 + 3 * d3)
    expected += (D * 3 * h + h * 3 * h + 3 * h) + 2 * (h * 3 * h + h * 3 * h + 3 * h)
    expected += h * C + C
    assert num_params(TINY) == expected
    assert num_params(ModelConfig(widths=(4, 6, 8), hidden=8, num_classes=3, use_bbox=True)) == expected + C


def test_checkpoint_roundtrip_bitwise(tmp_path, rng):
    cfg = ModelConfig(widths=(4, 6, 8), hidden=8, num_classes=3, use_bbox=True)
    p = init_params(cfg, rng)
    save_checkpoint(tmp_path / "a.cw", p, k=20, walk_len=0, walk_fraction=0.4, m=48)
    q, meta = load_checkpoint(tmp_path / "a.cw")
    assert q.cfg == cfg
    assert meta == {"k": 20, "walk_len": 0, "m": 48, "walk_fraction": 0.4}
    for name, arr in p.items():
        assert q[name].tobytes() == arr.tobytes()
    save_checkpoint(tmp_path / "b.cw", q, k=20, walk_len=0, walk_fraction=0.4, m=48)
    assert (tmp_path / "a.cw").read_bytes() == (tmp_path / "b.cw").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.cw").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "x.cw")

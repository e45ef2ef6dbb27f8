"""Walk classifier: per-point MLP with instance norm, stacked GRU, linear head.

Everything is float64 numpy with hand-written reverse-mode gradients.  A batch
is a stack of equal-length walks, coordinates shaped ``(B, l, 3)``.

Parameter names, in checkpoint order::

    mlp.{i}.W (in, d_i)   mlp.{i}.b (d_i)   [mlp.{i}.gamma (d_i)  mlp.{i}.beta (d_i)]
    gru.{j}.Wx (D, 3h)    gru.{j}.Wh (h, 3h)    gru.{j}.b (3h)
    head.W (h [+1], C)    head.b (C)

GRU column blocks are ordered [update z | reset r | candidate].  The
candidate applies the reset gate before the recurrent weights:
``n = tanh(Wx_n x + Wh_n (r * h) + b_n)`` and ``h' = (1 - z) h + z n``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError

IN_EPS = 1e-5
PROB_FLOOR = 1e-12
GRU_LAYERS = 3


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (128, 256, 512)
    hidden: int = 512
    num_classes: int = 40
    use_bbox: bool = False
    affine: bool = True

    def __post_init__(self):
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError(f"need three positive MLP widths, got {self.widths}")
        if self.hidden < 1 or self.num_classes < 1:
            raise ValueError("hidden width and class count must be positive")

    @property
    def feature_width(self) -> int:
        return self.widths[-1] + 3


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    fan_in = 3
    for i, d in enumerate(cfg.widths):
        shapes[f"mlp.{i}.W"] = (fan_in, d)
        shapes[f"mlp.{i}.b"] = (d,)
        if cfg.affine:
            shapes[f"mlp.{i}.gamma"] = (d,)
            shapes[f"mlp.{i}.beta"] = (d,)
        fan_in = d
    h = cfg.hidden
    fan_in = cfg.feature_width
    for j in range(GRU_LAYERS):
        shapes[f"gru.{j}.Wx"] = (fan_in, 3 * h)
        shapes[f"gru.{j}.Wh"] = (h, 3 * h)
        shapes[f"gru.{j}.b"] = (3 * h,)
        fan_in = h
    shapes["head.W"] = (h + int(cfg.use_bbox), cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def num_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


class ModelParams:
    """Config plus an ordered name -> array mapping."""

    def __init__(self, cfg: ModelConfig, tensors: dict):
        shapes = param_shapes(cfg)
        if list(tensors) != list(shapes):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.cfg = cfg
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name][...] = value

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases, gamma=1, beta=0."""
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        kind = name.rsplit(".", 1)[1]
        if kind in ("W", "Wx", "Wh"):
            fan_in, fan_out = shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-lim, lim, size=shape)
        elif kind == "gamma":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(cfg, tensors)


def zero_params(cfg: ModelConfig) -> ModelParams:
    return ModelParams(cfg, {n: np.zeros(s) for n, s in param_shapes(cfg).items()})


def _as_batch(coords) -> np.ndarray:
    x = np.asarray(coords, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != 3:
        raise DataError(f"walk coordinates must be (l, 3) or (B, l, 3), got {x.shape}")
    return x


# ---------------------------------------------------------------- point MLP

def _mlp_forward(params: ModelParams, x: np.ndarray):
    caches = []
    affine = params.cfg.affine
    for i in range(len(params.cfg.widths)):
        W, b = params[f"mlp.{i}.W"], params[f"mlp.{i}.b"]
        a = x @ W + b
        # shifting by the first position first makes a constant walk centre to exact zeros
        ac = a - a[:, :1]
        ac -= ac.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt((ac * ac).mean(axis=1, keepdims=True) + IN_EPS)
        xhat = ac * inv
        y = xhat * params[f"mlp.{i}.gamma"] + params[f"mlp.{i}.beta"] if affine else xhat
        out = np.maximum(y, 0.0)
        caches.append((x, xhat, inv, y))
        x = out
    return x, caches


def _mlp_backward(params: ModelParams, dout: np.ndarray, caches, grads: dict) -> None:
    affine = params.cfg.affine
    for i in reversed(range(len(caches))):
        x, xhat, inv, y = caches[i]
        dy = dout * (y > 0.0)
        if affine:
            grads[f"mlp.{i}.gamma"] += (dy * xhat).sum(axis=(0, 1))
            grads[f"mlp.{i}.beta"] += dy.sum(axis=(0, 1))
            dxhat = dy * params[f"mlp.{i}.gamma"]
        else:
            dxhat = dy
        da = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        W = params[f"mlp.{i}.W"]
        grads[f"mlp.{i}.W"] += x.reshape(-1, x.shape[-1]).T @ da.reshape(-1, da.shape[-1])
        grads[f"mlp.{i}.b"] += da.sum(axis=(0, 1))
        if i > 0:
            dout = da @ W.T


def point_embed(params: ModelParams, walk_coords) -> np.ndarray:
    """Per-point features, ``(l, d3)`` for one walk or ``(B, l, d3)`` for a batch."""
    x = _as_batch(walk_coords)
    out, _ = _mlp_forward(params, x)
    return out[0] if np.ndim(walk_coords) == 2 else out


def walk_features(params: ModelParams, walk_coords) -> np.ndarray:
    """Point features with the raw coordinates appended, width d3 + 3."""
    x = _as_batch(walk_coords)
    emb, _ = _mlp_forward(params, x)
    out = np.concatenate([emb, x], axis=2)
    return out[0] if np.ndim(walk_coords) == 2 else out


# ---------------------------------------------------------------- GRU

def gru_layer(Wx, Wh, b, xs, h0=None):
    """One GRU layer over time-major input ``(l, B, D)``.

    Returns the hidden sequence ``(l, B, h)`` and the cache for backprop.
    """
    l, B, _ = xs.shape
    h = Wh.shape[0]
    xp = xs @ Wx + b
    Wzr, Wn = np.ascontiguousarray(Wh[:, : 2 * h]), np.ascontiguousarray(Wh[:, 2 * h:])
    hs = np.empty((l, B, h))
    zrs = np.empty((l, B, 2 * h))
    ns = np.empty((l, B, h))
    hp = np.zeros((B, h)) if h0 is None else np.broadcast_to(np.asarray(h0, dtype=np.float64), (B, h)).copy()
    h_first = hp
    for t in range(l):
        zr = zrs[t]
        np.matmul(hp, Wzr, out=zr)
        zr += xp[t, :, : 2 * h]
        # sigmoid(x) = (1 + tanh(x / 2)) / 2; one vectorised tanh beats exp here
        zr *= 0.5
        np.tanh(zr, out=zr)
        zr += 1.0
        zr *= 0.5
        z = zr[:, :h]
        n = ns[t]
        np.matmul(zr[:, h:] * hp, Wn, out=n)
        n += xp[t, :, 2 * h:]
        np.tanh(n, out=n)
        h_new = hs[t]
        np.subtract(n, hp, out=h_new)
        h_new *= z
        h_new += hp
        hp = h_new
    return hs, (xs, h_first, hs, zrs, ns)


def gru_layer_backward(Wx, Wh, cache, dhs, grads_prefix, grads):
    """Backprop through one layer; ``dhs`` is dLoss/dh_t for every t.
    Accumulates into ``grads`` and returns dLoss/dxs."""
    xs, h_first, hs, zrs, ns = cache
    l, B, h = hs.shape
    Wzr, Wn = Wh[:, : 2 * h], Wh[:, 2 * h:]
    WzrT, WnT = Wzr.T.copy(), Wn.T.copy()
    hprev = np.empty_like(hs)
    hprev[0] = h_first
    hprev[1:] = hs[:-1]
    # gate derivatives, evaluated for all steps at once
    zs, rs = zrs[:, :, :h], zrs[:, :, h:]
    dn_coef = zs * (1.0 - ns * ns)
    dz_coef = (ns - hprev) * zs * (1.0 - zs)
    dr_coef = hprev * rs * (1.0 - rs)
    keep = 1.0 - zs
    dxp = np.empty((l, B, 3 * h))
    dh_next = np.zeros((B, h))
    for t in range(l - 1, -1, -1):
        dh = dhs[t] + dh_next
        g = dxp[t]
        dan = g[:, 2 * h:]
        np.multiply(dh, dn_coef[t], out=dan)
        drh = dan @ WnT
        np.multiply(dh, dz_coef[t], out=g[:, :h])
        np.multiply(drh, dr_coef[t], out=g[:, h: 2 * h])
        dh_next = g[:, : 2 * h] @ WzrT
        dh *= keep[t]
        drh *= rs[t]
        dh_next += dh
        dh_next += drh
    flat = dxp.reshape(-1, 3 * h)
    dWh = grads[grads_prefix + "Wh"]
    dWh[:, : 2 * h] += hprev.reshape(-1, h).T @ flat[:, : 2 * h]
    dWh[:, 2 * h:] += (rs * hprev).reshape(-1, h).T @ flat[:, 2 * h:]
    grads[grads_prefix + "b"] += flat.sum(axis=0)
    grads[grads_prefix + "Wx"] += xs.reshape(-1, xs.shape[-1]).T @ flat
    return dxp @ Wx.T


def _gru_stack(params: ModelParams, feats_tm: np.ndarray, h0=None):
    caches = []
    x = feats_tm
    for j in range(GRU_LAYERS):
        x, cache = gru_layer(params[f"gru.{j}.Wx"], params[f"gru.{j}.Wh"], params[f"gru.{j}.b"], x, h0)
        caches.append(cache)
    return x, caches


def gru_forward(params: ModelParams, features, h0=None) -> np.ndarray:
    """Last hidden state of the top GRU layer.  ``features`` is ``(l, D)`` or
    ``(B, l, D)``; ``h0`` (test hook) seeds every layer's initial state."""
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 2
    if single:
        f = f[None]
    if f.shape[2] != params["gru.0.Wx"].shape[0]:
        raise DataError(f"feature width {f.shape[2]} != {params['gru.0.Wx'].shape[0]}")
    hs, _ = _gru_stack(params, f.transpose(1, 0, 2), h0)
    return hs[-1][0] if single else hs[-1]


# ---------------------------------------------------------------- head, loss

def _head_input(params: ModelParams, r: np.ndarray, bbox) -> np.ndarray:
    if params.cfg.use_bbox:
        if bbox is None:
            raise DataError("model expects a bounding-box feature")
        bb = np.broadcast_to(np.asarray(bbox, dtype=np.float64).reshape(-1, 1), (r.shape[0], 1))
        return np.concatenate([r, bb], axis=1)
    if bbox is not None:
        raise DataError("model was configured without a bounding-box feature")
    return r


def classify_head(params: ModelParams, r, bbox_diag=None) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 1
    feat = _head_input(params, r.reshape(1, -1) if single else r, bbox_diag)
    logits = feat @ params["head.W"] + params["head.b"]
    return logits[0] if single else logits


def softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probs, target) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < p.shape[-1]:
        raise IndexError(f"target {target} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[target], PROB_FLOOR)))


# ---------------------------------------------------------------- full model

@dataclass
class ForwardCache:
    x: np.ndarray
    mlp: list
    gru: list
    head_in: np.ndarray
    probs: np.ndarray


def forward(params: ModelParams, coords, bbox=None, keep_cache: bool = False):
    """Logits for a batch of walks; with ``keep_cache`` also the backprop cache."""
    x = _as_batch(coords)
    emb, mlp_caches = _mlp_forward(params, x)
    feats = np.concatenate([emb, x], axis=2).transpose(1, 0, 2)
    hs, gru_caches = _gru_stack(params, feats)
    head_in = _head_input(params, hs[-1], bbox)
    logits = head_in @ params["head.W"] + params["head.b"]
    if not keep_cache:
        return logits
    return logits, ForwardCache(x, mlp_caches, gru_caches, head_in, softmax(logits))


def predict_proba(params: ModelParams, coords, bbox=None) -> np.ndarray:
    return softmax(forward(params, coords, bbox))


def backward(params: ModelParams, cache: ForwardCache, targets) -> tuple[float, dict]:
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    cfg = params.cfg
    probs = cache.probs
    B = probs.shape[0]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(targets) != B:
        raise ValueError(f"{len(targets)} targets for {B} walks")
    pt = probs[np.arange(B), targets]
    loss = float(np.mean(-np.log(np.maximum(pt, PROB_FLOOR))))
    grads = params.zeros_like()

    dlogits = probs.copy()
    dlogits[np.arange(B), targets] -= 1.0
    # floored probabilities contribute a constant, so no gradient
    dlogits[pt < PROB_FLOOR] = 0.0
    dlogits /= B
    grads["head.W"] += cache.head_in.T @ dlogits
    grads["head.b"] += dlogits.sum(axis=0)
    dr = (dlogits @ params["head.W"].T)[:, : cfg.hidden]

    l = cache.x.shape[1]
    dhs = np.zeros((l, B, cfg.hidden))
    dhs[-1] = dr
    for j in reversed(range(GRU_LAYERS)):
        dhs = gru_layer_backward(params[f"gru.{j}.Wx"], params[f"gru.{j}.Wh"], cache.gru[j],
                                 dhs, f"gru.{j}.", grads)
    d_emb = dhs[:, :, : cfg.widths[-1]].transpose(1, 0, 2)
    _mlp_backward(params, d_emb, cache.mlp, grads)
    return loss, grads


def loss_and_grad(params: ModelParams, coords, targets, bbox=None) -> tuple[float, dict]:
    _, cache = forward(params, coords, bbox, keep_cache=True)
    return backward(params, cache, targets)


def batch_loss(params: ModelParams, coords, targets, bbox=None) -> float:
    p = predict_proba(params, coords, bbox)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    return float(np.mean(-np.log(np.maximum(p[np.arange(len(t)), t], PROB_FLOOR))))



def gradient_check(params: ModelParams, coords, targets, bbox=None, step: float = 1e-5) -> float:
    """Largest relative error between the analytic gradient and central
    differences, over every parameter entry.  Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)``."""
    _, grads = loss_and_grad(params, coords, targets, bbox)
    worst = 0.0
    for name, arr in params.items():
        g = grads[name]
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            up = batch_loss(params, coords, targets, bbox)
            arr[idx] = old - step
            down = batch_loss(params, coords, targets, bbox)
            arr[idx] = old
            num = (up - down) / (2.0 * step)
            worst = max(worst, abs(g[idx] - num) / max(abs(g[idx]), abs(num), 1e-6))
    return worst


def gradcheck_suite(count: int = 20, seed: int = 0, step: float = 1e-5) -> list:
    """Run ``gradient_check`` on ``count`` random tiny models and inputs.

    Biases and affine parameters are moved off their initial values so that
    no gradient path starts at a symmetric point.
    """
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(count):
        cfg = ModelConfig(widths=tuple(int(w) for w in rng.integers(2, 6, 3)),
                          hidden=int(rng.integers(2, 6)), num_classes=int(rng.integers(2, 5)),
                          use_bbox=bool(rng.integers(2)), affine=bool(rng.integers(2)))
        params = init_params(cfg, rng)
        for name, arr in params.items():
            if not name.endswith(("W", "Wx", "Wh")):
                arr += rng.normal(0.0, 0.3, arr.shape)
        B, length = int(rng.integers(1, 4)), int(rng.integers(2, 7))
        coords = rng.normal(size=(B, length, 3))
        bbox = rng.uniform(0.5, 3.0, B) if cfg.use_bbox else None
        targets = rng.integers(cfg.num_classes, size=B)
        errors.append(gradient_check(params, coords, targets, bbox, step))
    return errors


# ---------------------------------------------------------------- checkpoints
#
# Layout, all little-endian:
#   magic  b"CWCK"
#   u32    format version (1)
#   i64 x10  d1 d2 d3 h C use_bbox affine k walk_len m   (walk_len 0 = fraction)
#   f64    walk_fraction (NaN when walk_len is set)
#   u32    tensor count
#   per tensor, in param_shapes order:
#     u16 name length, name (utf-8), u32 ndim, u64 x ndim dims, f64 x size values

MAGIC = b"CWCK"
FORMAT_VERSION = 1


def save_checkpoint(path, params: ModelParams, k: int = 20, walk_len: int = 0,
                    walk_fraction: Optional[float] = None, m: int = 48) -> None:
    cfg = params.cfg
    frac = float("nan") if walk_fraction is None else float(walk_fraction)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<10q", *cfg.widths, cfg.hidden, cfg.num_classes,
                         int(cfg.use_bbox), int(cfg.affine), k, walk_len, m),
             struct.pack("<d", frac),
             struct.pack("<I", len(params.tensors))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    rec = struct.unpack_from("<10q", buf, 8)
    (frac,) = struct.unpack_from("<d", buf, 88)
    (count,) = struct.unpack_from("<I", buf, 96)
    d1, d2, d3, h, C, use_bbox, affine, k, walk_len, m = rec
    cfg = ModelConfig(widths=(d1, d2, d3), hidden=h, num_classes=C,
                      use_bbox=bool(use_bbox), affine=bool(affine))
    pos = 100
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos: pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(buf):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    meta = {"k": k, "walk_len": walk_len, "m": m,
            "walk_fraction": None if np.isnan(frac) else frac}
    return ModelParams(cfg, tensors), meta

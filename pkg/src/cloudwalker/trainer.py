"""Adam with a triangular cyclic learning rate, and the training loop."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, NumericError
from .neural_core import ModelConfig, ModelParams, backward, forward, init_params, save_checkpoint
from .seeding import substream
from .walker import PreparedShape, WalkParams, generate_walk

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_min: float = 1e-6
    lr_max: float = 5e-4
    cycle_iters: int = 20000
    total_iters: int = 100000
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    ckpt_every: int = 0  # 0: only the final checkpoint
    acc_window: int = 100

    def __post_init__(self):
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if self.cycle_iters <= 0:
            raise ValueError("cycle_iters must be positive")
        if self.total_iters < 1 or self.batch_size < 1:
            raise ValueError("total_iters and batch_size must be positive")


def cyclic_lr(it: int, cfg: TrainConfig) -> float:
    """Triangular schedule: lr_min at cycle starts, lr_max at mid-cycle,
    linear in between."""
    if it < 0:
        raise ValueError("iteration must be non-negative")
    half = cfg.cycle_iters / 2.0
    pos = it % cfg.cycle_iters
    frac = pos / half if pos <= half else (cfg.cycle_iters - pos) / half
    return (1.0 - frac) * cfg.lr_min + frac * cfg.lr_max


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "OptimizerState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: ModelParams, grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place bias-corrected Adam update; returns (params, state)."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {theta.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)  # (iter, lr, loss, acc)
    checkpoints: list = field(default_factory=list)


def _batch_step(params: ModelParams, shapes, walks, labels):
    """Mean loss, gradients and #correct over a batch that may mix walk lengths."""
    B = len(walks)
    groups = {}
    for slot, w in enumerate(walks):
        groups.setdefault(len(w), []).append(slot)
    total = params.zeros_like()
    loss = 0.0
    correct = 0
    for length in sorted(groups):
        slots = groups[length]
        coords = np.stack([shapes[s].cloud.points[walks[s].indices] for s in slots])
        bbox = np.array([shapes[s].scale.bbox_diagonal for s in slots]) if params.cfg.use_bbox else None
        targets = np.array([labels[s] for s in slots])
        _, cache = forward(params, coords, bbox, keep_cache=True)
        g_loss, grads = backward(params, cache, targets)
        w = len(slots) / B
        loss += w * g_loss
        for name in total:
            total[name] += w * grads[name]
        correct += int((cache.probs.argmax(axis=1) == targets).sum())
    return loss, total, correct


def train(shapes: Sequence[PreparedShape], model_cfg: ModelConfig, cfg: TrainConfig,
          walk_params: WalkParams, out_dir: Optional[Path] = None,
          init: Optional[ModelParams] = None) -> TrainResult:
    """Train on fresh random walks.  Each iteration draws ``batch_size``
    shapes uniformly with replacement and one new walk per draw.

    Walks at iteration ``it`` use sub-stream ``(seed, "walk", it, slot)``; the
    shape draw uses ``(seed, "batch", it)``; initialisation uses
    ``(seed, "init")``.
    """
    if not shapes:
        raise DataError("training set is empty")
    for s in shapes:
        if s.label is None or not 0 <= s.label < model_cfg.num_classes:
            raise DataError(f"cloud {s.id!r}: label {s.label} outside [0, {model_cfg.num_classes})")
        n = len(s.cloud)
        if walk_params.length_for(n) > n:
            raise DataError(f"cloud {s.id!r}: walk longer than cloud ({walk_params.length_for(n)} > {n})")
        if walk_params.k > n - 1:
            raise DataError(f"cloud {s.id!r}: k={walk_params.k} needs more than {n} points")

    params = init.copy() if init is not None else init_params(model_cfg, substream(cfg.seed, "init"))
    state = OptimizerState.fresh(params)
    result = TrainResult(params)
    recent = deque(maxlen=cfg.acc_window)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    for it in range(cfg.total_iters):
        pick = substream(cfg.seed, "batch", it).integers(len(shapes), size=cfg.batch_size)
        batch = [shapes[i] for i in pick.tolist()]
        walks = [generate_walk(s.cloud, s.tree, walk_params, substream(cfg.seed, "walk", it, slot))
                 for slot, s in enumerate(batch)]
        loss, grads, correct = _batch_step(params, batch, walks, [s.label for s in batch])
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at iteration {it}")
        lr = cyclic_lr(it, cfg)
        adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        recent.append(correct / cfg.batch_size)
        result.log.append((it, lr, loss, float(np.mean(recent))))
        done = it + 1
        if out_dir is not None and (done == cfg.total_iters or (cfg.ckpt_every and done % cfg.ckpt_every == 0)):
            path = out_dir / f"ckpt_{done}.cw"
            save_checkpoint(path, params, k=walk_params.k, walk_len=walk_params.length or 0,
                            walk_fraction=walk_params.fraction)
            result.checkpoints.append(path)
        if done % 500 == 0:
            log.info("iter %d lr %.3g loss %.4f acc %.3f", done, lr, loss, result.log[-1][3])
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter {name} became non-finite")
    return result


def write_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "lr", "loss", "acc"])
        for it, lr, loss, acc in rows:
            w.writerow([it, repr(lr), repr(loss), repr(acc)])

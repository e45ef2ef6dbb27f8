"""Command-line entry point.

Every subcommand reads an optional ``key = value`` config file; flags named
after config keys (``--walk-len 204``) override it.  All randomness derives
from the root ``seed``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .analysis import (class_accuracy, complexity_indicator, complexity_stats, evaluate_retrieval,
                       fit_indicator_line, instance_accuracy, write_complexity, write_rankings)
from .errors import ConfigError, DataError, NumericError
from .inference import METHODS, classify_dataset, write_predictions
from .neural_core import ModelConfig, gradcheck_suite, load_checkpoint
from .point_set import SHAPE_KINDS, add_noise, load_manifest, save_xyz, synth_shape, write_manifest
from .trainer import TrainConfig, train, write_log
from .walker import STRATEGIES, WalkParams, generate_walks, prepare_shape, write_walks

log = logging.getLogger("cloudwalker")

GRADCHECK_TOL = 1e-4


@dataclass
class RunConfig:
    train_manifest: Optional[Path] = None
    test_manifest: Optional[Path] = None
    out_dir: Path = Path("runs")
    seed: int = 0
    # model
    d1: int = 128
    d2: int = 256
    d3: int = 512
    hidden: int = 512
    num_classes: int = 0  # 0: taken from the training manifest
    use_bbox: bool = False
    affine: bool = True
    # walks
    walk_len: int = 0
    walk_fraction: float = 0.4
    k: int = 20
    strategy: str = "random"
    combined_variance_prob: float = 0.3
    m: int = 48
    aggregation: str = "majority"
    # training
    lr_min: float = 1e-6
    lr_max: float = 5e-4
    cycle_iters: int = 20000
    total_iters: int = 100000
    batch_size: int = 32
    ckpt_every: int = 0
    explicit: set = field(default_factory=set, repr=False, compare=False)

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(widths=(self.d1, self.d2, self.d3), hidden=self.hidden,
                           num_classes=self.num_classes or num_classes,
                           use_bbox=self.use_bbox, affine=self.affine)

    def walk_params(self) -> WalkParams:
        if self.walk_len:
            return WalkParams(length=self.walk_len, k=self.k, strategy=self.strategy,
                              combined_variance_prob=self.combined_variance_prob, seed=self.seed)
        return WalkParams(fraction=self.walk_fraction, k=self.k, strategy=self.strategy,
                          combined_variance_prob=self.combined_variance_prob, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr_min=self.lr_min, lr_max=self.lr_max, cycle_iters=self.cycle_iters,
                           total_iters=self.total_iters, batch_size=self.batch_size,
                           seed=self.seed, ckpt_every=self.ckpt_every)


CONFIG_KEYS = {f.name: f.type for f in fields(RunConfig) if f.name != "explicit"}
_PARSERS = {"int": int, "float": float, "str": str, "Path": Path, "Optional[Path]": Path}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, text: str):
    kind = CONFIG_KEYS[key]
    conv = _parse_bool if kind == "bool" else _PARSERS[kind]
    try:
        return conv(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {text.strip()!r}") from None


def _apply(cfg: RunConfig, key: str, value, origin: str) -> RunConfig:
    if key not in CONFIG_KEYS:
        raise ConfigError(f"{origin}: unknown key {key!r}")
    cfg = replace(cfg, **{key: value})
    cfg.explicit = cfg.explicit | {key}
    return cfg


def validate(cfg: RunConfig, require_dataset: bool = True) -> RunConfig:
    if {"walk_len", "walk_fraction"} <= cfg.explicit:
        raise ConfigError("conflicting walk length: set walk_len or walk_fraction, not both")
    if require_dataset and cfg.train_manifest is None:
        raise ConfigError("missing dataset path: train_manifest is required")
    for key in ("train_manifest", "test_manifest"):
        path = getattr(cfg, key)
        if require_dataset and path is not None and not Path(path).is_file():
            raise DataError(f"{key}: no such file {path}")
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {', '.join(STRATEGIES)}")
    if cfg.aggregation not in METHODS:
        raise ConfigError(f"aggregation must be one of {', '.join(METHODS)}")
    if cfg.m < 1:
        raise ConfigError("m must be at least 1")
    try:
        cfg.walk_params()
        cfg.train_config()
        cfg.model_config(cfg.num_classes or 2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def read_config(path=None, overrides=()) -> RunConfig:
    """Parse a config file (if any) and apply ``(key, text)`` overrides, without validation."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        for lineno, raw in enumerate(lines, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            value = _coerce(key, value)
            if key.endswith("_manifest") and not value.is_absolute():
                value = path.parent / value
            cfg = _apply(cfg, key, value, f"{path}:{lineno}")
    for key, text in overrides:
        cfg = _apply(cfg, key, _coerce(key, text), f"--{key.replace('_', '-')}")
    return cfg


def parse_config(path, overrides=(), require_dataset: bool = True) -> RunConfig:
    """Read and validate a run config, filling in defaults."""
    return validate(read_config(path, overrides), require_dataset)


# ------------------------------------------------------------------ commands

def _load_split(manifest, class_count: Optional[int] = None, names_from: Optional[Path] = None):
    """Load and prepare one split; ``names_from`` fixes the class numbering."""
    names = load_manifest(names_from).class_names if names_from is not None else None
    ds = load_manifest(manifest, names)
    if class_count is not None and ds.num_classes > class_count:
        raise DataError(f"{manifest}: {ds.num_classes} classes but the model has {class_count}")
    return ds, [prepare_shape(c) for c in ds.load_clouds()]


def _need_test(cfg: RunConfig) -> Path:
    if cfg.test_manifest is None:
        raise ConfigError("test_manifest is required for this command")
    return cfg.test_manifest


def cmd_synth(args, cfg: RunConfig) -> int:
    """Clean primitives, plus ``ood_fraction`` extra heavily noised copies per
    class that keep their source label.  Clean shapes do not depend on the
    OOD settings, so augmented and clean datasets share them."""
    out = Path(args.out or cfg.out_dir)
    for split, count in (("train", args.per_class), ("test", args.test_per_class)):
        rows = []
        (out / split).mkdir(parents=True, exist_ok=True)
        extra = int(round(args.ood_fraction * count))
        for label, kind in enumerate(SHAPE_KINDS):
            for i in range(count + extra):
                shape_seed = cfg.seed * 1_000_000 + (split == "test") * 100_000 + label * 1000 + i
                cloud = synth_shape(kind, args.points, shape_seed)
                name = f"{kind}_{i:04d}"
                if i >= count:
                    cloud = add_noise(cloud, args.ood_sigma, shape_seed)
                    name += "_ood"
                rel = Path(split) / f"{name}.xyz"
                save_xyz(cloud, out / rel)
                rows.append((rel.as_posix(), kind))
        write_manifest(out / f"{split}.csv", rows)
    print(f"wrote {out / 'train.csv'} and {out / 'test.csv'}")
    return 0


def cmd_walks(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = cfg.test_manifest if args.split == "test" else cfg.train_manifest
    if manifest is None:
        raise ConfigError(f"{args.split}_manifest is required")
    _, shapes = _load_split(manifest, names_from=cfg.train_manifest)
    wp = cfg.walk_params()
    walks = []
    for i, s in enumerate(shapes):
        walks.extend(generate_walks(s.cloud, s.tree, wp, cfg.m, seed=cfg.seed, stream=("infer", i)))
    path = out / f"walks_{args.split}.txt"
    write_walks(path, walks)
    print(f"wrote {len(walks)} walks to {path}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.out_dir)
    ds, shapes = _load_split(cfg.train_manifest)
    model_cfg = cfg.model_config(ds.num_classes)
    res = train(shapes, model_cfg, cfg.train_config(), cfg.walk_params(), out_dir=out)
    write_log(out / "train_log.csv", res.log)
    print(f"final checkpoint {res.checkpoints[-1]}; last loss {res.log[-1][2]:.4f}")
    return 0


def _predict(args, cfg: RunConfig, manifest):
    params, _ = load_checkpoint(args.checkpoint)
    ds, shapes = _load_split(manifest, params.cfg.num_classes, names_from=cfg.train_manifest)
    preds = classify_dataset(params, shapes, cfg.m, cfg.walk_params(), cfg.aggregation, seed=cfg.seed)
    return params, ds, preds


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params, _, preds = _predict(args, cfg, _need_test(cfg))
    write_predictions(out / "predictions.csv", preds)
    finals = [p.final_class for p in preds]
    labels = [p.label for p in preds]
    ia = instance_accuracy(finals, labels)
    line = f"IA {ia:.4f}"
    try:
        line += f"  CA {class_accuracy(finals, labels, params.cfg.num_classes):.4f}"
    except ValueError:
        line += "  CA undefined (a class has no test shapes)"
    print(line)
    return 0


def cmd_retrieve(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, _, preds = _predict(args, cfg, _need_test(cfg))
    res = evaluate_retrieval([p.cloud_id for p in preds], [p.descriptor for p in preds],
                             [p.label for p in preds])
    write_rankings(out / "rankings.csv", res.rankings)
    print(f"mAP {res.mAP:.4f}")
    return 0


def cmd_complexity(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_manifest = _need_test(cfg)
    _, _, train_preds = _predict(args, cfg, cfg.train_manifest)
    _, _, test_preds = _predict(args, cfg, test_manifest)
    train_stats = [complexity_stats(p.cloud_id, p.walk_probs, p.label, p.final_class) for p in train_preds]
    try:
        line = fit_indicator_line(train_stats)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    test_stats = [complexity_stats(p.cloud_id, p.walk_probs, p.label, p.final_class) for p in test_preds]
    write_complexity(out / "complexity.csv", test_stats, line)
    for flag in (1, 0):
        group = [s for s in test_stats if complexity_indicator(s, line) == flag]
        rate = sum(not s.correct for s in group) / len(group) if group else float("nan")
        print(f"f={flag}: {len(group)} shapes, misclassification rate {rate:.4f}")
    print(f"line a={line.a:.6g} b={line.b:.6g}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    errors = gradcheck_suite(args.count, seed=cfg.seed)
    worst = max(errors)
    print(f"{len(errors)} models, max relative error {worst:.3e}")
    if not worst < GRADCHECK_TOL:
        raise NumericError(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOL}")
    return 0


# -------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, config_flags: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, help="root seed (overrides config)")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1)")
    p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    if config_flags:
        group = p.add_argument_group("config overrides")
        for key in CONFIG_KEYS:
            if key in ("seed", "out_dir"):
                continue
            group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="VALUE",
                               help=f"override {key}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cloudwalker", description="Random-walk point cloud classification.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic sphere/cube/cylinder/torus dataset")
    _add_common(p, config_flags=False)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--ood-fraction", type=float, default=0.0,
                   help="add this fraction of extra heavily noised shapes per class")
    p.add_argument("--ood-sigma", type=float, default=0.3, help="noise std of the extra shapes")
    p.set_defaults(func=cmd_synth, needs_data=False)

    p = sub.add_parser("walks", help="generate and cache m walks per shape")
    _add_common(p)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_walks, needs_data=True)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    _add_common(p)
    p.set_defaults(func=cmd_train, needs_data=True)

    for name, func, text in (("eval", cmd_eval, "classify the test split, report IA and CA"),
                             ("retrieve", cmd_retrieve, "rank the test split by descriptor, report mAP"),
                             ("complexity", cmd_complexity, "fit the complexity line on train, report on test")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.set_defaults(func=func, needs_data=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p, config_flags=False)
    p.add_argument("--count", type=int, default=20, help="number of random tiny models")
    p.set_defaults(func=cmd_gradcheck, needs_data=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = [(k[4:], v) for k, v in vars(args).items() if k.startswith("cfg_") and v is not None]
        if args.seed is not None:
            overrides.append(("seed", str(args.seed)))
        cfg = parse_config(args.config, overrides, require_dataset=args.needs_data)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        with threadpool_limits(limits=args.threads):
            return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: gen-data, train, eval, pseudo-labels, export-metrics.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, training
from .metrics import angle_histogram
from .prototypes import cosine_scores
from .pseudo_labels import LabelMap, assign_pseudo_labels

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = training.TrainConfig()
    for f in training.fields(training.TrainConfig):
        key = training._FIELD_KEYS[f.name]
        p.add_argument(f"--{key}", dest=f"cfg_{f.name}", default=None, metavar="V",
                       help=f"(default {getattr(defaults, f.name)!r})")


def build_parser() -> Parser:
    parser = Parser(prog="mpscl", description="Prototype-anchored contrastive domain adaptation on synthetic scenes.",
                    epilog="exit codes: 0 success, 1 usage error, 2 runtime error, 3 numerical abort")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", help="render the synthetic two-domain dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, required=True, help="training scenes per domain")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    g.add_argument("--val-scenes", type=int, default=0)
    g.add_argument("--test-scenes", type=int, default=0)
    g.add_argument("--num-classes", type=int, default=5)

    t = sub.add_parser("train", help="two-phase training",
                       description="Every config key can be overridden by a flag of the same name. "
                                   "Precedence: flag > config file > built-in default.")
    t.add_argument("--config", required=True, help="key=value config file")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_config_flags(t)

    e = sub.add_parser("eval", help="Dice/ASD of a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=data.SPLITS)
    e.add_argument("--domain", default=None, help="defaults to the checkpoint's target domain")
    e.add_argument("--out", default=None, help="CSV path (default: next to the checkpoint)")

    s = sub.add_parser("pseudo-labels", help="write prediction/confidence/selection/pseudo-label maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train", choices=data.SPLITS)
    s.add_argument("--delta_th", type=float, default=None, help="defaults to the checkpoint config")

    x = sub.add_parser("export-metrics", help="eval_report.csv and angle_hist.csv")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--split", default="test", choices=("val", "test"))
    x.add_argument("--bins", type=int, default=18)
    return parser


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    if args.scenes < 0 or args.val_scenes < 0 or args.test_scenes < 0:
        raise UsageError("scene counts must be non-negative")
    path = data.generate_dataset(args.out, args.scenes, seed=args.seed, size=tuple(args.size),
                                 val_scenes=args.val_scenes, test_scenes=args.test_scenes,
                                 num_classes=args.num_classes)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise UsageError(f"config file not found: {cfg_path}")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        values = training.parse_config_text(cfg_path.read_text(encoding="utf-8"))
        for k, v in overrides.items():
            values[k] = training._coerce(k, v)
        cfg = training.TrainConfig(**values)
    except ValueError as err:
        raise UsageError(str(err)) from None
    if not cfg.data_dir:
        raise UsageError("data_dir is not set (config key or --data_dir)")
    result = training.train(cfg, resume=args.resume)
    print(f"best iteration {result.best_iteration} val dice {result.best_val_dice:.4f}")
    print(f"checkpoints: {result.best_checkpoint} {result.last_checkpoint}")
    return EXIT_OK


def _load(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return training.load_checkpoint(path)


def cmd_eval(args) -> int:
    state = _load(args.checkpoint)
    domain = args.domain or state.cfg.target_domain
    ds = data.SceneDataset(args.data, role="eval", target_domain=state.cfg.target_domain)
    images, masks = ds.images(args.split, domain), ds.masks(args.split, domain)
    if len(images) == 0:
        raise ValueError(f"no {args.split}/{domain} scenes in {args.data}")
    report = training.evaluate(state.generator, images, masks, state.cfg.num_classes)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.split}_{domain}.csv")
    report.write_csv(out)
    print(report.summary())
    print(f"wrote {out}")
    return EXIT_OK


def _prototypes_for(state, ds):
    if state.prototypes is not None:
        return state.prototypes
    cfg = state.cfg
    return training.bootstrap_prototypes(state.generator, ds.images("train", cfg.source_domain),
                                         ds.masks("train", cfg.source_domain), cfg)


def cmd_pseudo_labels(args) -> int:
    state = _load(args.checkpoint)
    cfg = state.cfg
    delta = cfg.delta_th if args.delta_th is None else args.delta_th
    ds = data.SceneDataset(args.data, role="train", target_domain=cfg.target_domain)
    protos = _prototypes_for(state, ds)
    images = ds.images(args.split, cfg.target_domain)
    feats, _ = training.extract_features(state.generator, images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = images.shape[1:3]
    for i, f in enumerate(feats):
        scores = cosine_scores(f, protos).data
        labels, rep = assign_pseudo_labels(scores, delta, shape=(h, w))
        diff16 = np.rint(np.clip(rep.difference, 0.0, 2.0) / 2.0 * 65535).astype(np.uint16)
        maps = {
            "prediction": (rep.top_index.reshape(h, w).astype(np.uint8), 255),
            "confidence": (diff16.reshape(h, w), 65535),
            "selection": (np.where(rep.mask, 255, 0).reshape(h, w).astype(np.uint8), 255),
            "pseudo": ((labels.indices + 1).astype(np.uint8), 255),
        }
        for name, (raster, maxval) in maps.items():
            data.write_pgm(out / f"{i:05d}_{name}.pgm", raster, maxval=maxval)
    print(f"wrote {4 * len(feats)} maps to {out}")
    return EXIT_OK


def cmd_export_metrics(args) -> int:
    state = _load(args.checkpoint)
    cfg = state.cfg
    ds = data.SceneDataset(args.data, role="eval", target_domain=cfg.target_domain)
    images, masks = ds.images(args.split, cfg.target_domain), ds.masks(args.split, cfg.target_domain)
    if len(images) == 0:
        raise ValueError(f"no {args.split}/{cfg.target_domain} scenes in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = training.evaluate(state.generator, images, masks, cfg.num_classes)
    report.write_csv(out / "eval_report.csv")
    feats, _ = training.extract_features(state.generator, images)
    hist = angle_histogram(feats, LabelMap.from_indices(masks, cfg.num_classes), _prototypes_for(state, ds),
                           bins=args.bins)
    hist.write_csv(out / "angle_hist.csv")
    print(report.summary())
    print(f"mean positive angle {hist.mean:.4f} rad, fraction below pi/4 {hist.fraction_below():.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "pseudo-labels": cmd_pseudo_labels,
    "export-metrics": cmd_export_metrics,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except training.NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``advnorm <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error / unknown flag / missing file,
2 runtime or divergence error. Every subcommand that writes output also
writes ``resolved_config.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import ExperimentConfig, load_config
from .exceptions import AdvNormError, DivergenceError, ValidationError
from .trainer import CHECKPOINT_NAME, MODES, Trainer, run_training
from .validation import check_fractions

logger = logging.getLogger("advnorm")

SNAPSHOT = "resolved_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _apply_threads():
    value = os.environ.get("ADVNORM_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise ValidationError(f"ADVNORM_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ValidationError(f"ADVNORM_THREADS must be a positive integer, got {value!r}")
    import torch

    torch.set_num_threads(n)


def _resolve(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    overrides = {}
    if getattr(args, "patch_size", None) is not None:
        overrides["patch_size"] = args.patch_size
    if getattr(args, "stride", None) is not None:
        overrides["stride"] = args.stride
    if getattr(args, "target_spacing", None) is not None:
        overrides["target_spacing"] = args.target_spacing
    if isinstance(getattr(args, "split", None), tuple):
        overrides["split"] = args.split
    if overrides:
        cfg = cfg.with_pipeline(**overrides)
    return cfg


def _out_dir(args):
    if not args.out:
        raise ValidationError("--out DIR is required")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _snapshot(out, cfg, extra=None):
    doc = cfg.to_dict()
    if extra:
        doc["run"] = extra
    with open(os.path.join(out, SNAPSHOT), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _require_file(path, what):
    if not path:
        raise ValidationError(f"{what} is required")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _config_from_checkpoint(trainer, args):
    if args.config:
        return _resolve(args)
    doc = trainer.meta.get("experiment")
    cfg = ExperimentConfig.from_dict(doc) if doc else ExperimentConfig()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_phantom(args):
    from .phantom import PhantomConfig, generate_domain_dataset

    out = _out_dir(args)
    doc = None
    if args.config:
        _require_file(args.config, "config file")
        with open(args.config) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{args.config} is not valid JSON: {exc}") from None
    if doc is not None and "phantom" not in doc and "domains" in doc:
        cfg = ExperimentConfig(phantom=PhantomConfig.from_dict(doc))     # bare PhantomConfig
    else:
        cfg = _resolve(args)
    if args.seed is not None:
        cfg.phantom.seed = int(args.seed)
    manifest = generate_domain_dataset(cfg.phantom, out)
    _snapshot(out, cfg, {"command": "phantom", "manifest": os.path.join(out, "manifest.json")})
    print(f"wrote {len(manifest)} samples to {out}")


def cmd_preprocess(args):
    from .pipeline import PARTITIONS, build_splits
    from .volume import SegmentationMask, Volume, save_volume

    cfg = _resolve(args)
    out = _out_dir(args)
    splits = build_splits(cfg, standardize=args.standardize)
    patch_dir = os.path.join(out, "patches")
    os.makedirs(patch_dir, exist_ok=True)
    index = []
    k = 0
    for part in PARTITIONS:
        ps = splits[part]
        for i in range(len(ps)):
            stem = f"patch_{k:05d}"
            save_volume(Volume(ps.images[i]), os.path.join(patch_dir, stem + "_image.mvol"))
            save_volume(SegmentationMask(ps.masks[i], splits.n_classes), os.path.join(patch_dir, stem + "_mask.mvol"))
            index.append({"id": stem, "partition": part, "domain": int(ps.domains[i]),
                          "center_class": int(ps.center_class[i]), "origin": [int(o) for o in ps.origins[i]],
                          "source_id": ps.source_ids[i],
                          "image": f"patches/{stem}_image.mvol", "mask": f"patches/{stem}_mask.mvol"})
            k += 1
    doc = {"patch_size": cfg.pipeline.patch_size, "stride": cfg.pipeline.stride,
           "target_spacing": cfg.pipeline.target_spacing, "split": list(cfg.pipeline.split),
           "standardized": bool(args.standardize), "n_domains": splits.n_domains,
           "n_classes": splits.n_classes, "achieved_fractions": splits.assignment.fractions,
           "patches": index}
    with open(os.path.join(out, "index.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
    _snapshot(out, cfg, {"command": "preprocess", "standardize": bool(args.standardize)})
    counts = {p: len(splits[p]) for p in PARTITIONS}
    print(f"wrote {k} patches to {patch_dir} ({counts})")


def cmd_train(args):
    cfg = _resolve(args)
    out = _out_dir(args)
    resume = _require_file(args.checkpoint, "checkpoint") if args.checkpoint else None
    if args.epochs is not None:
        cfg = cfg.with_train(total_epochs=max(args.epochs, cfg.train.pretrain_epochs))
    _snapshot(out, cfg, {"command": "train", "mode": args.mode, "resume": resume})
    trainer = run_training(cfg, args.mode, out, resume=resume, epochs=args.epochs)
    # run_training wrote the plain config; keep the run details in the snapshot
    _snapshot(out, cfg, {"command": "train", "mode": args.mode, "resume": resume})
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {args.mode} for {trainer.epoch} epochs; checkpoint {os.path.join(out, CHECKPOINT_NAME)}")
    if "val_dice" in last:
        print("validation dice: " + ", ".join(f"{k}={v:.3f}" for k, v in last["val_dice"].items()))


def cmd_evaluate(args):
    from . import metrics
    from .experiments import evaluate_patches
    from .pipeline import build_splits

    trainer = Trainer.load(_require_file(args.checkpoint, "checkpoint"))
    cfg = _config_from_checkpoint(trainer, args)
    out = _out_dir(args)
    standardize = bool(trainer.meta.get("standardize", False))
    splits = build_splits(cfg, standardize=standardize)
    domains = trainer.meta.get("train_domains")
    data = splits[args.split]
    if args.domains:
        data = splits.restrict([int(d) for d in args.domains.split(",")])[args.split]
    elif domains:
        data = splits.restrict(domains)[args.split]
    dice, mean, empty = evaluate_patches(trainer, data, splits.n_classes)
    result = {"checkpoint": os.path.abspath(args.checkpoint), "split": args.split, "n_patches": len(data),
              "mode": trainer.mode, "dice": dice, "mean_dice": mean, "empty_classes": empty}
    if trainer.generator is not None:
        bins = cfg.evaluation.jsd_bins
        result["jsd_input"] = metrics.patch_jsd(data.images, data.masks, bins)
        result["jsd_normalized"] = metrics.patch_jsd(trainer.normalize(data.images), data.masks, bins)
    with open(os.path.join(out, "evaluation.json"), "w") as fh:
        json.dump(result, fh, indent=2)
    _snapshot(out, cfg, {"command": "evaluate", "checkpoint": os.path.abspath(args.checkpoint),
                         "split": args.split})
    print(json.dumps(result, indent=2))


def normalize_volume(checkpoint, volume_path, out_path, stride=None, mask_path=None,
                     target_spacing=1.0, batch_size=32):
    """Apply a trained generator patch-wise to a whole volume.

    The volume is optionally skull-stripped with ``mask_path``, resampled to
    the isotropic training spacing when its spacing differs, tiled with
    patches on the stride lattice (plus a final origin per axis so every
    voxel is covered) and the overlapping generator outputs are averaged.
    Resampled volumes are mapped back to the input grid, so the output always
    has the input's shape and spacing.
    """
    from .pipeline import average_patches, resample_intensities, skull_strip, tiling_origins
    from .volume import SegmentationMask, Volume, load_volume, save_volume

    trainer = checkpoint if isinstance(checkpoint, Trainer) else Trainer.load(checkpoint)
    if trainer.generator is None:
        raise ValidationError("checkpoint has no generator (trained in segmenter_only mode)")
    volume = load_volume(volume_path)
    if not isinstance(volume, Volume):
        raise ValidationError(f"{volume_path} holds a label map, not an intensity volume")
    if mask_path is not None:
        mask = load_volume(mask_path)
        if not isinstance(mask, SegmentationMask):
            raise ValidationError(f"{mask_path} is not a label map")
        volume = skull_strip(volume, mask)
    spacing = np.asarray(volume.spacing, dtype=np.float64)
    resample = not np.allclose(spacing, target_spacing, rtol=0, atol=1e-9)
    data = volume.data
    if resample:
        iso_shape = tuple(int(round(n * s / target_spacing)) for n, s in zip(volume.shape, spacing))
        data = resample_intensities(data, spacing, target_spacing, iso_shape)
    p = trainer.patch_size
    if min(data.shape) < p:
        raise ValidationError(f"volume of shape {data.shape} is smaller than the patch size {p}")
    stride = stride or max(1, p // 2)
    origins = tiling_origins(data.shape, p, stride)
    cubes = np.stack([data[tuple(slice(o, o + p) for o in origin)] for origin in origins])
    outputs = trainer.normalize(cubes.astype(np.float32), batch_size=batch_size)
    mean, count = average_patches(outputs[:, None], origins, data.shape)
    out = mean[0]
    if resample:
        out = resample_intensities(out, target_spacing, spacing, volume.shape)
    if not np.isfinite(out).all() or not (count > 0).all():
        raise DivergenceError("generator produced non-finite intensities")
    result = Volume(out.astype(np.float32), volume.spacing)
    save_volume(result, out_path)
    return result


def cmd_normalize(args):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.input, "input volume")
    out = _out_dir(args)
    trainer = Trainer.load(args.checkpoint)
    cfg = _config_from_checkpoint(trainer, args)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    target = os.path.join(out, f"{stem}_normalized.mvol")
    stride = args.stride if args.stride is not None else None
    if args.mask:
        _require_file(args.mask, "mask volume")
    normalize_volume(trainer, args.input, target, stride=stride, mask_path=args.mask,
                     target_spacing=cfg.pipeline.target_spacing)
    _snapshot(out, cfg, {"command": "normalize", "checkpoint": os.path.abspath(args.checkpoint),
                         "input": os.path.abspath(args.input), "stride": stride})
    print(f"wrote {target}")


def cmd_report(args):
    from .experiments import load_reports, write_reports, render_table

    rundir = args.rundir or args.out
    if not rundir or not os.path.isdir(rundir):
        raise FileNotFoundError(f"run directory not found: {rundir}")
    reports = load_reports(rundir)
    out = args.out or rundir
    os.makedirs(out, exist_ok=True)
    write_reports(out, reports)
    snapshot = os.path.join(rundir, SNAPSHOT)
    if out != rundir and os.path.isfile(snapshot):
        with open(snapshot) as src, open(os.path.join(out, SNAPSHOT), "w") as dst:
            dst.write(src.read())
    print(render_table(reports), end="")


def cmd_matrix(args):
    from .experiments import render_table, run_experiment_matrix

    cfg = _resolve(args)
    out = _out_dir(args)
    reports = run_experiment_matrix(cfg, out, epochs=args.epochs)
    print(render_table(reports), end="")
    if all(r.status == "failed" for r in reports):
        raise RuntimeError("every experiment in the matrix failed")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("seed must be >= 0")
    return v


def _fractions(text):
    try:
        return check_fractions(text)
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _spacing(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("target spacing must be > 0")
    return v


def build_parser():
    parser = _Parser(prog="advnorm", description="Adversarial intensity normalization for multi-domain "
                                                 "3-D segmentation (synthetic phantom workflow).")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", metavar="PATH", help="experiment config JSON (defaults when omitted)")
        if out:
            p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=_seed, metavar="N", help="override the config seed")

    def pipeline_flags(p):
        p.add_argument("--patch-size", type=_positive_int, metavar="P")
        p.add_argument("--stride", type=_positive_int, metavar="S")
        p.add_argument("--target-spacing", type=_spacing, metavar="MM")

    p = sub.add_parser("phantom", help="generate a multi-domain phantom dataset")
    common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="preprocess, extract and split patches")
    common(p)
    pipeline_flags(p)
    p.add_argument("--split", type=_fractions, metavar="F,F,F", help="train,validation,test fractions")
    p.add_argument("--standardize", action="store_true", help="Gaussian-standardize each volume")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model")
    common(p)
    pipeline_flags(p)
    p.add_argument("--mode", choices=MODES, default="adversarial")
    p.add_argument("--checkpoint", metavar="PATH", help="resume from this checkpoint")
    p.add_argument("--epochs", type=_positive_int, metavar="N", help="override total epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Dice (and JSD) of a checkpoint on one split")
    common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--domains", metavar="D[,D]", help="restrict to these domains")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("normalize", help="normalize a volume with a trained generator")
    common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--input", metavar="PATH", required=True, help="intensity volume (.mvol)")
    p.add_argument("--mask", metavar="PATH", help="label map used to skull-strip the input first")
    p.add_argument("--stride", type=_positive_int, metavar="S", help="tiling stride (default P/2)")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("report", help="render the experiment table of a matrix run")
    p.add_argument("--rundir", metavar="DIR", help="matrix output directory")
    p.add_argument("--out", metavar="DIR", help="where to write the table (default: rundir)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("matrix", help="run the seven-row experiment matrix")
    common(p)
    pipeline_flags(p)
    p.add_argument("--epochs", type=_positive_int, metavar="N", help="override total epochs")
    p.set_defaults(func=cmd_matrix)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads()
        args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AdvNormError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

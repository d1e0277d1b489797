"""
Command-line entry point: python -m s2me <command> [options]

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .ablation import GRIDS, AblationRunner
from .config import PRESETS, parse_overrides, resolve_config, write_config_file
from .data import (
    DatasetManifest,
    corpus_statistics,
    generate_synthetic_dataset,
    parse_corruption,
    tensor_file_read,
    tensor_file_write,
)
from .errors import ConfigError, ShapeError
from .evaluation import evaluate_dataset, load_seed_model, predict_probabilities, stack_samples
from .fusion import FUSION_STRATEGIES, entropy_map, fuse, pseudo_label
from .selftest import run_selftest
from .trainer import train_seeds
from .utils import load_environment, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(ConfigError):
    """Bad command-line arguments"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed_list(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"seeds must be a comma-separated list of integers, got {text!r}")
    if not seeds:
        raise UsageError("at least one seed is required")
    return seeds


def _prepare_out_dir(path: Path, force: bool, allow_existing: bool = False) -> None:
    if path.exists() and any(path.iterdir()) and not (force or allow_existing):
        raise UsageError(f"output directory {path} is not empty (use --force)")
    os.makedirs(path, exist_ok=True)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    setup_logging(out, "gen_data.log")
    manifest = generate_synthetic_dataset(
        out, args.train, args.val, args.test, size=args.size, seed=args.seed, max_label_fraction=args.max_label_fraction
    )
    stats = corpus_statistics(manifest)
    print(f"📁 Dataset written to {out}")
    for split, s in stats.items():
        if s["count"]:
            print(
                f"  {split}: {s['count']} samples, fg fraction {s['fg_fraction_mean']:.3f}, "
                f"labeled fraction {s['labeled_fraction_mean']:.4f} (max {s['labeled_fraction_max']:.4f})"
            )
        else:
            print(f"  {split}: 0 samples")
    if manifest.flagged:
        print(f"  ⚠️ {len(manifest.flagged)} samples flagged (no foreground scribble)")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force, allow_existing=args.resume)
    setup_logging(out, "train.log")
    overrides = list(args.set or [])
    if args.fusion:
        overrides.append(f"fusion={args.fusion}")
    config = resolve_config(args.method, args.config, overrides)
    write_config_file(out / "config.txt", config)
    manifest = DatasetManifest.load(args.data)

    seeds = _seed_list(args.seed) if args.seed else [config.seed]
    results = train_seeds(config, manifest, out, seeds, resume=args.resume, force=args.force)
    failed = [seed for seed, r in results.items() if isinstance(r, dict)]
    for seed, result in results.items():
        if isinstance(result, dict):
            print(f"❌ seed {seed}: {result['error']}")
        else:
            print(f"✅ seed {seed}: best val DSC {result.best_val_dsc:.4f} at iteration {result.best_iteration}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    out = Path(args.out) if args.out else run_dir
    stem = "metrics" if args.branch == "spatial" else f"metrics_{args.branch}"
    # defaults to the run directory, which is never empty
    target = out / f"{stem}.json"
    if target.exists() and not args.force:
        raise UsageError(f"{target} already exists (use --force)")
    setup_logging(out, "eval.log")
    corruptions = [c for c in (args.corrupt or "").split(",") if c.strip()]
    for tag in corruptions:
        try:
            parse_corruption(tag)
        except ValueError as e:
            raise UsageError(str(e))

    table = evaluate_dataset(
        run_dir,
        DatasetManifest.load(args.data),
        split=args.split,
        seeds=_seed_list(args.seeds),
        method=args.method,
        branch=args.branch,
        corruptions=corruptions,
        batch_size=args.batch_size,
        percentile=args.percentile,
    )
    table.save(out, stem)
    for row in table.aggregate.itertuples():
        print(
            f"{row.method} | {row.dataset} | DSC {row.dsc_mean:.4f}±{row.dsc_std:.4f} | IoU {row.iou_mean:.4f}±{row.iou_std:.4f} "
            f"| Prec {row.precision_mean:.4f}±{row.precision_std:.4f} | HD {row.hd_mean:.2f}±{row.hd_std:.2f}"
        )
    return EXIT_OK


def _to_png(path: Path, values: np.ndarray, scale: float = 1.0) -> None:
    pixels = np.clip(values / scale, 0.0, 1.0) * 255.0
    Image.fromarray(pixels.astype(np.uint8)).save(path)


def _read_probabilities(path: str) -> np.ndarray:
    """The single entry of an S2TF file, or its entry named "p"; C x H x W gains a batch axis"""
    entries = tensor_file_read(path)
    if len(entries) == 1:
        (p,) = entries.values()
    elif "p" in entries:
        p = entries["p"]
    else:
        raise UsageError(f"{path} holds entries {sorted(entries)}; expected a single entry or one named 'p'")
    return p[None] if p.ndim == 3 else p


def _fuse_files(args) -> int:
    out = Path(args.out or "fusion")
    _prepare_out_dir(out, args.force)
    setup_logging(out, "fuse.log")

    p_spa, p_spe = _read_probabilities(args.p_spa), _read_probabilities(args.p_spe)
    try:
        h_spa, h_spe = entropy_map(p_spa), entropy_map(p_spe)
        p_fused = fuse(args.strategy, p_spa, p_spe, np.random.default_rng(args.seed))
    except ValueError as e:
        raise UsageError(str(e))
    y_fused = pseudo_label(p_fused).labels

    tensor_file_write(out / "fused.s2tf", {"p": p_fused})
    tensor_file_write(out / "pseudo_label.s2tf", {"y": y_fused})
    tensor_file_write(out / "entropy_spa.s2tf", {"h": h_spa.values})
    tensor_file_write(out / "entropy_spe.s2tf", {"h": h_spe.values})
    logger.info(f"Fused {args.p_spa} and {args.p_spe} with strategy {args.strategy} into {out}")
    print(f"📁 Fused map, pseudo label and entropy maps written to {out}")
    print(f"  mean entropy: spatial {h_spa.values.mean():.4f}, spectral {h_spe.values.mean():.4f}")
    print(f"  foreground fraction of the pseudo label: {np.mean(y_fused == 1):.4f}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    """Fuse two probability-map files, or both branches of one trained seed on a few samples"""
    files, run = (args.p_spa, args.p_spe), (args.run, args.data)
    if all(files) and not any(run):
        return _fuse_files(args)
    if any(files) or not all(run):
        raise UsageError("fuse needs either --p-spa and --p-spe, or --run and --data")

    run_dir = Path(args.run)
    out = Path(args.out) if args.out else run_dir / "fusion"
    _prepare_out_dir(out, args.force)
    setup_logging(out, "fuse.log")

    manifest = DatasetManifest.load(args.data)
    samples = manifest.load_split(args.split)[: args.count]
    if not samples:
        raise UsageError(f"split {args.split} has no samples")
    images, masks = stack_samples(samples)
    p_spa = predict_probabilities(load_seed_model(run_dir, args.seed, "spatial"), images)
    p_spe = predict_probabilities(load_seed_model(run_dir, args.seed, "spectral"), images)
    p_fused = fuse(args.strategy, p_spa, p_spe, np.random.default_rng(args.seed))
    h_spa, h_spe = entropy_map(p_spa).values, entropy_map(p_spe).values
    labels = {
        "spatial": pseudo_label(p_spa).labels,
        "spectral": pseudo_label(p_spe).labels,
        "fused": pseudo_label(p_fused).labels,
    }

    tensor_file_write(
        out / f"fused_{args.strategy}.s2tf",
        {"p_spa": p_spa, "p_spe": p_spe, "h_spa": h_spa, "h_spe": h_spe, "p_fused": p_fused, "y_fused": labels["fused"]},
    )
    print(f"Fusion '{args.strategy}' on {len(samples)} {args.split} samples (seed {args.seed})")
    print(f"  mean entropy: spatial {h_spa.mean():.4f}, spectral {h_spe.mean():.4f}")
    for name, y in labels.items():
        print(f"  {name} pseudo-label pixel accuracy: {np.mean(y == masks):.4f}")

    if args.preview:
        for i, sample in enumerate(samples):
            stem = sample.sample_id or f"sample-{i}"
            _to_png(out / f"{stem}_h_spa.png", h_spa[i], np.log(2.0))
            _to_png(out / f"{stem}_h_spe.png", h_spe[i], np.log(2.0))
            _to_png(out / f"{stem}_p_fused.png", p_fused[i, 1])
            _to_png(out / f"{stem}_y_fused.png", labels["fused"][i].astype(np.float64))
        print(f"  previews written to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    setup_logging(out, "ablate.log")
    grids = [g.strip() for g in args.grids.split(",") if g.strip()]
    unknown = [g for g in grids if g not in GRIDS]
    if unknown:
        raise UsageError(f"unknown grids {unknown}; choose from {sorted(GRIDS)}")
    overrides = parse_overrides(args.set or [])

    runner = AblationRunner(DatasetManifest.load(args.data), out, _seed_list(args.seeds), overrides, args.jobs)
    results = runner.run(grids)
    print((out / "ablation.md").read_text())
    failed = int((results["error"] != "").sum())
    if failed:
        print(f"⚠️ {failed} cells failed; see {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    setup_logging(None)
    results = run_selftest(args.filter)
    if not results:
        raise UsageError(f"no checks match filter {args.filter!r}")
    for r in results:
        print(f"{'✅' if r.passed else '❌'} {r.name} ({r.seconds:.2f}s): {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print(f"Failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="s2me", description="Scribble-supervised dual-branch segmentation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic scribble corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-label-fraction", type=float, default=0.05)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train both branches")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=sorted(PRESETS))
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--fusion", choices=FUSION_STRATEGIES)
    p.add_argument("--seed", help="seed or comma-separated seeds")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score trained checkpoints")
    p.add_argument("--run", required=True, help="training output directory holding seed-<s>/")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--seeds", default="0")
    p.add_argument("--method", default="s2me", help="label for the method column")
    p.add_argument("--branch", choices=("spatial", "spectral"), default="spatial")
    p.add_argument("--corrupt", help="comma-separated kind:severity list, e.g. blur:2,specular:1")
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("fuse", help="fuse two probability maps, or inspect fused pseudo labels of a trained run")
    p.add_argument("--p-spa", help="S2TF probability map of the spatial branch")
    p.add_argument("--p-spe", help="S2TF probability map of the spectral branch")
    p.add_argument("--run", help="training output directory holding seed-<s>/")
    p.add_argument("--data")
    p.add_argument("--split", default="val")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", choices=FUSION_STRATEGIES, default="entropy")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--preview", action="store_true", help="write PNG previews")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("ablate", help="run the ablation grids")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grids", default="network,fusion,loss")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--jobs", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("selftest", help="run gradient, fusion, FFT and metric checks")
    p.add_argument("--filter", help="only run checks whose name contains this text")
    p.set_defaults(handler=cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_environment()
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except (ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        logger.exception("Command failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME

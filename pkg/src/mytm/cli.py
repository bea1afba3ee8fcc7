"""``mytm`` command line: dataset, train, reage, eval, video and ablate subcommands."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import torch

from . import __version__
from .ablation import LADDERS, run_ablation_ladder, run_dataset_size_ablation, write_table
from .adapter import personalized_reage
from .backends import load_bundle
from .config import RunConfig, config_hash, load_config, parse_ablate
from .data import coverage_summary, ingest_and_align, load_manifest, uncovered_ages
from .errors import (
    BackendError,
    CheckpointError,
    ConfigError,
    DomainError,
    ManifestError,
    MyTMError,
    StructuralError,
    VideoJobError,
)
from .evaluator import EvalProtocol, emit_plots, run_protocol, write_report
from .images import load_image, save_image
from .trainer import load_adapter, train
from .video import VideoJob, reage_video

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_VALIDATION_ERRORS = (ConfigError, ManifestError, DomainError, StructuralError, CheckpointError, VideoJobError)


def _age(value: str) -> float:
    try:
        age = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid age {value!r}") from None
    if not 0.0 <= age <= 100.0:
        raise argparse.ArgumentTypeError(f"age must be within [0, 100], got {value}")
    return age


def _sizes(value: str) -> List[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size list {value!r}") from None


def _load_run_config(args: argparse.Namespace, **overrides: Any) -> RunConfig:
    merged: Dict[str, Any] = {"backend": args.backend, "seed": args.seed}
    merged.update(overrides)
    return load_config(args.config, merged)


def _load_net(args: argparse.Namespace, bundle):
    if getattr(args, "no_adapter", False):
        return None, True
    if args.ckpt is None:
        raise ConfigError("--ckpt is required unless --no-adapter is given")
    net, metadata = load_adapter(args.ckpt, dtype=bundle.dtype)
    if metadata.get("backend_name") != bundle.name:
        logger.warning(
            "Checkpoint was trained on backend=%s but running backend=%s", metadata.get("backend_name"), bundle.name
        )
    return net, False


def cmd_dataset_validate(args: argparse.Namespace) -> int:
    collection = load_manifest(args.manifest)
    print(f"records: {len(collection)}  train age range: {collection.age_min:g}-{collection.age_max:g}")
    for split, counts in coverage_summary(collection).items():
        histogram = "  ".join(f"{label}:{count}" for label, count in counts.items()) or "(none)"
        print(f"{split:>9}  {histogram}")
    protocol = EvalProtocol.for_task(args.task)
    missing = uncovered_ages(collection, protocol.target_ages, window=protocol.window)
    if missing:
        ages = ", ".join(f"{age:g}" for age in missing)
        print(f"warning: no reference photos within {protocol.window} years of ages: {ages}", file=sys.stderr)
    return EXIT_OK


def cmd_dataset_ingest(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    bundle = load_bundle(config)
    report = ingest_and_align(args.raw, args.manifest_out, bundle, ages_file=args.ages_file)
    print(f"aligned: {report.written}  skipped: {report.skipped}  manifest: {report.manifest}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_run_config(args, iterations=args.iterations, **parse_ablate(args.ablate))
    bundle = load_bundle(config)
    collection = load_manifest(args.manifest)
    checkpoint = train(collection, bundle, config, args.out, resume_from=args.resume, progress=args.progress)
    print(checkpoint)
    return EXIT_OK


def cmd_reage(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    bundle = load_bundle(config)
    net, bypass = _load_net(args, bundle)
    image = bundle.align_face(load_image(args.image, dtype=bundle.dtype))
    with torch.no_grad():
        output, _ = personalized_reage(bundle, net, image, args.age, use_adapter=not bypass)
    save_image(output, args.out)
    estimate = float(bundle.estimate_age(output, "eval"))
    print(f"wrote {args.out}  estimated age: {estimate:.1f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    bundle = load_bundle(config)
    collection = load_manifest(args.manifest)
    net, bypass = _load_net(args, bundle)
    protocol = EvalProtocol.for_task(args.task)
    digest = config_hash(config)
    report = run_protocol(
        bundle, net, collection, protocol, use_adapter=not bypass,
        label="global" if bypass else "personalized", config_hash=digest, seed=config.seed,
    )
    write_report(report, args.out)
    reports = [report]
    if args.with_baseline and not bypass:
        reports.append(
            run_protocol(bundle, None, collection, protocol, use_adapter=False, label="global",
                         config_hash=digest, seed=config.seed)
        )
    emit_plots(reports, args.out)
    print(json.dumps(report.aggregates, indent=2))
    return EXIT_OK


def cmd_video(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    bundle = load_bundle(config)
    net, bypass = _load_net(args, bundle)
    job = VideoJob(
        frames_dir=args.frames,
        keyframe=args.keyframe,
        target_age=args.age,
        out_dir=args.out,
        checkpoint=args.ckpt,
        paste_alpha=config.paste_alpha,
        workers=config.workers,
    )
    result = reage_video(bundle, net, job, use_adapter=not bypass, config_hash=config_hash(config), seed=config.seed)
    print(f"frames: {result.summary['frame_count']}  swapped: {result.summary['swapped']}  "
          f"passthrough: {result.summary['passthrough']}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_run_config(args, iterations=args.iterations)
    bundle = load_bundle(config)
    collection = load_manifest(args.manifest)
    protocol = EvalProtocol.for_task(args.task)
    rows = []
    if args.mode in {"ladder", "both"}:
        rows.extend(run_ablation_ladder(collection, bundle, config, args.out, protocol, order=args.order))
    if args.mode in {"size", "both"}:
        rows.extend(run_dataset_size_ablation(collection, bundle, config, args.out, protocol, sizes=args.sizes))
    write_table(rows, args.out)
    for row in rows:
        sim = "n/a" if row.id_sim is None else f"{row.id_sim:.4f}"
        print(f"{row.name:<20} {row.status:<12} id_sim={sim}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Flat YAML config file")
    common.add_argument("--backend", choices=["toy", "real"], default=None, help="Backend override")
    common.add_argument("--seed", type=int, default=None, help="Seed override")
    common.add_argument("--verbose", action="store_true", help="Enable verbose (DEBUG level) logging")

    parser = argparse.ArgumentParser(prog="mytm", description="Personalized face re-aging toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="Validate or ingest photo collections")
    dataset_sub = dataset.add_subparsers(dest="dataset_command", required=True)
    validate = dataset_sub.add_parser("validate", parents=[common], help="Check a manifest and its coverage")
    validate.add_argument("--manifest", type=Path, required=True)
    validate.add_argument("--task", choices=["regression", "progression"], default="regression")
    validate.set_defaults(func=cmd_dataset_validate)
    ingest = dataset_sub.add_parser("ingest", parents=[common], help="Align raw photos and write a manifest")
    ingest.add_argument("--raw", type=Path, required=True, help="Directory of raw photos")
    ingest.add_argument("--manifest-out", type=Path, required=True)
    ingest.add_argument("--ages-file", type=Path, default=None, help="CSV filename,age_years (default RAW/ages.csv)")
    ingest.set_defaults(func=cmd_dataset_ingest)

    train_p = sub.add_parser("train", parents=[common], help="Train a personalized adapter")
    train_p.add_argument("--manifest", type=Path, required=True)
    train_p.add_argument("--out", type=Path, required=True)
    train_p.add_argument("--iterations", type=int, default=None)
    train_p.add_argument("--ablate", default=None, help="Comma list of adapter,extra,persage,wnorm to disable")
    train_p.add_argument("--resume", type=Path, default=None, help="Checkpoint directory to resume from")
    train_p.add_argument("--progress", action="store_true", help="Show a progress bar")
    train_p.set_defaults(func=cmd_train)

    reage = sub.add_parser("reage", parents=[common], help="Re-age one photo")
    reage.add_argument("--image", type=Path, required=True)
    reage.add_argument("--age", type=_age, required=True)
    reage.add_argument("--ckpt", type=Path, default=None)
    reage.add_argument("--no-adapter", action="store_true", help="Use the global model only")
    reage.add_argument("--out", type=Path, required=True)
    reage.set_defaults(func=cmd_reage)

    evaluate = sub.add_parser("eval", parents=[common], help="Run the Age_MAE / ID_sim protocol")
    evaluate.add_argument("--manifest", type=Path, required=True)
    evaluate.add_argument("--ckpt", type=Path, default=None)
    evaluate.add_argument("--no-adapter", action="store_true")
    evaluate.add_argument("--task", choices=["regression", "progression"], required=True)
    evaluate.add_argument("--with-baseline", action="store_true", help="Overlay the global model in the plots")
    evaluate.add_argument("--out", type=Path, required=True)
    evaluate.set_defaults(func=cmd_eval)

    video = sub.add_parser("video", parents=[common], help="Re-age a directory of numbered frames")
    video.add_argument("--frames", type=Path, required=True)
    video.add_argument("--keyframe", type=int, required=True)
    video.add_argument("--age", type=_age, required=True)
    video.add_argument("--ckpt", type=Path, default=None)
    video.add_argument("--no-adapter", action="store_true")
    video.add_argument("--out", type=Path, required=True)
    video.set_defaults(func=cmd_video)

    ablate = sub.add_parser("ablate", parents=[common], help="Component ladder and dataset-size sweeps")
    ablate.add_argument("--manifest", type=Path, required=True)
    ablate.add_argument("--out", type=Path, required=True)
    ablate.add_argument("--mode", choices=["ladder", "size", "both"], default="ladder")
    ablate.add_argument("--order", choices=sorted(LADDERS), default="component")
    ablate.add_argument("--sizes", type=_sizes, default=[10, 50, 100])
    ablate.add_argument("--iterations", type=int, default=None)
    ablate.add_argument("--task", choices=["regression", "progression"], default="regression")
    ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    logging.basicConfig(level=logging.INFO)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        logger.error("Backend failure: %s", exc)
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except MyTMError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Single command-line entry point.

Verbs: dataset-gen, train, infer, eval, grad-check, inspect-ckpt.
Exit statuses are a stable scripting contract: 0 success, 1 usage error,
2 data/IO error, 3 numerical failure. Every run that produces files also
writes a reproducibility stamp (config hash and text, seed, version,
full argv) next to its outputs.

The environment variable ``ICHAR_CACHE`` names a directory reused for
rendered-image caches across runs; it is optional.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, config_hash, config_to_text, load_config
from .checkpoint import checkpoint_summary
from .dataset import generate_dataset, load_manifest, write_dataset
from .errors import CharAdapterError, DataError, NumericalError, UsageError
from .evaluation import generate_for_record, gradient_check, identity_similarity, run_eval
from .images import load_png, save_png
from .model import build_model, model_from_archive
from .rng import seeded_rng
from .training import (
    TrainState,
    load_train_checkpoint,
    pretrain_backbone,
    run_curriculum,
    run_stage,
    save_train_checkpoint,
)
from .vocab import tokenize_text


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="charadapter", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)

    p = sub.add_parser("dataset-gen", help="generate a synthetic character dataset")
    p.add_argument("--characters", type=int, required=True)
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--unpaired-fraction", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="pretrain the backbone and/or run curriculum stages")
    p.add_argument("--config", default=None)
    p.add_argument("--stage", choices=["base", "1", "2", "3", "all"], default="all")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("infer", help="generate one image from a reference and caption")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="run the evaluation protocol over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report path (.json) or directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--component", choices=["adapter", "dit_xattn"], required=True)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("inspect-ckpt", help="summarize a checkpoint file")
    p.add_argument("path")
    return parser


def _resolve_config(path: str | None, seed: int | None) -> RunConfig:
    config = load_config(path) if path else RunConfig.desk_default()
    if seed is not None:
        config.seed = seed
        config.validate()
    return config


def _write_stamp(out_dir: Path, verb: str, argv: list[str], config: RunConfig | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = {
        "verb": verb,
        "argv": argv,
        "version": __version__,
        "seed": config.seed if config else None,
        "config_hash": config_hash(config) if config else None,
        "config": config_to_text(config) if config else None,
    }
    (out_dir / "stamp.json").write_text(json.dumps(stamp, indent=2, sort_keys=True))


def _cmd_dataset_gen(args, argv) -> int:
    config = _resolve_config(args.config, args.seed)
    out_dir = Path(args.out)
    manifest = generate_dataset(
        args.characters,
        args.views,
        args.unpaired_fraction,
        seeded_rng(config.seed, "dataset-gen"),
    )
    path = write_dataset(manifest, out_dir)
    _write_stamp(out_dir, "dataset-gen", argv, config)
    print(f"wrote {len(manifest.records)} records to {path}")
    return 0


def _cmd_train(args, argv) -> int:
    out_dir = Path(args.out)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    base_dir = manifest_path.parent

    if args.resume:
        model, state = load_train_checkpoint(args.resume)
        config = model.config
        if args.seed is not None and args.seed != config.seed:
            raise DataError("--seed differs from the resumed checkpoint's seed")
    else:
        config = _resolve_config(args.config, args.seed)
        model, state = None, None

    torch.set_num_threads(max(1, config.num_threads))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_stamp(out_dir, "train", argv, config)

    if args.stage in ("base", "all"):
        if model is None:
            print("building model (encoder warm-up included)...", flush=True)
            model = build_model(config)
        pretrain_backbone(config, manifest, model, base_dir)
        save_train_checkpoint(model, None, out_dir / "ckpt_base.icpt")
        print(f"backbone pretrained for {config.pretrain.steps} steps", flush=True)
        if args.stage == "base":
            return 0
        state = TrainState.create(model, config)

    if model is None:
        raise UsageError(f"--stage {args.stage} requires --resume with an earlier checkpoint")

    if args.stage == "all":
        final = run_curriculum(config.stages, manifest, model, base_dir, out_dir, state)
        print(f"curriculum complete: {final}")
        return 0

    stage = config.stage(int(args.stage))
    state = state or TrainState.create(model, config)
    run_stage(stage, manifest, model, state, base_dir, out_dir)
    print(f"stage {stage.stage_id} complete")
    return 0


def _cmd_infer(args, argv) -> int:
    model, _ = load_train_checkpoint(args.ckpt)
    config = model.config
    torch.set_num_threads(max(1, config.num_threads))
    reference = load_png(args.reference)
    caption_ids = tuple(tokenize_text(args.caption))
    steps = args.steps or config.sample_steps
    seed = args.seed if args.seed is not None else config.seed

    out_dir = Path(args.out)
    gen = generate_for_record(
        model, reference, caption_ids, steps, args.scale, seed, stream="infer/sample"
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    save_png(gen, out_dir / "sample.png")
    similarity = identity_similarity(
        model.semantic_encoder, gen, reference, config.encoder_resolution
    )
    metadata = {
        "reference": str(args.reference),
        "caption": args.caption,
        "caption_ids": list(caption_ids),
        "steps": steps,
        "scale": args.scale,
        "seed": seed,
        "identity_similarity": similarity,
    }
    (out_dir / "metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True))
    _write_stamp(out_dir, "infer", argv, config)
    print(f"sample written to {out_dir / 'sample.png'} (similarity {similarity:.3f})")
    return 0


def _cmd_eval(args, argv) -> int:
    model, _ = load_train_checkpoint(args.ckpt)
    config = model.config
    torch.set_num_threads(max(1, config.num_threads))
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)

    out = Path(args.out)
    out_dir = out.parent if out.suffix == ".json" else out
    report = run_eval(
        model,
        manifest,
        manifest_path.parent,
        out_dir=out_dir,
        steps=args.steps,
        seed=args.seed,
    )
    if out.suffix == ".json" and out != out_dir / "report.json":
        out.write_text(report.to_json(), encoding="utf-8")
    _write_stamp(out_dir, "eval", argv, config)
    print(
        f"ranking accuracy {report.identity_ranking_accuracy:.3f}, "
        f"adherence {report.prompt_adherence_rate:.3f}, "
        f"copy-paste {report.mean_copy_paste_score:.3f}"
    )
    return 0


def _cmd_grad_check(args) -> int:
    error = gradient_check(args.component, args.tol)
    print(f"{args.component}: max relative error {error:.3e} (tolerance {args.tol:.1e})")
    return 0


def _cmd_inspect(args) -> int:
    summary = checkpoint_summary(args.path)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    cache_dir = os.environ.get("ICHAR_CACHE")
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    try:
        args = _build_parser().parse_args(argv)
        if args.verb is None:
            raise UsageError("a command verb is required (see --help)")
        if args.verb == "dataset-gen":
            return _cmd_dataset_gen(args, argv)
        if args.verb == "train":
            return _cmd_train(args, argv)
        if args.verb == "infer":
            return _cmd_infer(args, argv)
        if args.verb == "eval":
            return _cmd_eval(args, argv)
        if args.verb == "grad-check":
            return _cmd_grad_check(args)
        if args.verb == "inspect-ckpt":
            return _cmd_inspect(args)
        raise UsageError(f"unknown verb {args.verb!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CharAdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

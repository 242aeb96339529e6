"""Command-line entry point: synthesize, train, restore, evaluate.

Every subcommand validates its configuration before touching the
filesystem and runs deterministically under a fixed --seed. Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig, load_run_config, schema_keys
from .degradation import synthesize_pairs
from .errors import ConfigError, DataError, FaceRestoreError, NumericError
from .imaging import load_image, resize, save_image
from .losses import ConvStackEmbedding, ConvStackExtractor
from .tensorops import image_to_tensor, tensor_to_image

CONFIG_ENV_VAR = "FACERESTORE_CONFIG"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _config_epilog() -> str:
    keys = "\n".join(f"  {k}" for k in schema_keys())
    return (
        "config file keys (YAML; any subset, unknown keys rejected;\n"
        "top-level 'preset: desk|paper' selects the base):\n" + keys
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facerestore",
        description="Blind face restoration toolkit",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_syn = sub.add_parser("synthesize", help="synthesize degraded LQ/HQ training pairs")
    p_syn.add_argument("--hq-dir", required=True, help="directory of high-quality images")
    p_syn.add_argument("--out-dir", required=True, help="output directory for pairs + manifest")
    p_syn.add_argument("--count", type=int, required=True, help="number of pairs to write")
    p_syn.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_syn.add_argument("--config", default=None, help="run config file (YAML)")
    p_syn.add_argument(
        "--resolution", type=int, default=None,
        help="resize HQ images to this square size first (default: model base resolution)",
    )

    p_train = sub.add_parser("train", help="train the restoration model")
    p_train.add_argument("--config", default=None, help="run config file (YAML)")
    p_train.add_argument("--pairs-dir", default=None, help="synthesized pairs directory")
    p_train.add_argument("--out-dir", default=None, help="checkpoint/log output directory")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument(
        "--allow-config-mismatch", action="store_true",
        help="resume even if the config hash differs from the checkpoint",
    )
    for flag, dest in (
        ("--no-mmrb", "use_mmrb"),
        ("--no-local-d", "use_local_d"),
        ("--no-finetune-prior", "finetune_prior"),
        ("--no-freeze-d", "freeze_d"),
    ):
        p_train.add_argument(flag, dest=dest, action="store_false", default=None,
                             help=f"ablation switch (sets train.{dest}=false)")

    p_res = sub.add_parser("restore", help="restore images with a trained checkpoint")
    p_res.add_argument("--input", required=True, help="input image file or directory")
    p_res.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p_res.add_argument("--output", required=True, help="output file or directory")
    p_res.add_argument(
        "--upscale", action="store_true",
        help="bicubic-upscale inputs to the model resolution first",
    )
    p_res.add_argument("--config", default=None, help="optional config to check compatibility")

    p_eval = sub.add_parser("evaluate", help="score restored images")
    p_eval.add_argument("--restored", required=True, help="directory of restored images")
    p_eval.add_argument("--reference", default=None, help="directory of ground-truth images")
    p_eval.add_argument("--pristine", default=None, help="pristine corpus for the NIQE fit")
    p_eval.add_argument("--niqe-model", default=None, help="previously fitted NIQE model file")
    p_eval.add_argument("--niqe-patch", type=int, default=96, help="NIQE patch size")
    p_eval.add_argument(
        "--deep-extractor", default=None,
        help="'test' for the builtin seeded extractor, or an extractor container path",
    )
    p_eval.add_argument("--out", default=None, help="directory for report.json / report.txt")
    return parser


def _load_config(path: str | None, seed: int | None = None) -> RunConfig:
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    cfg = load_run_config(path, preset="desk")
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def cmd_synthesize(args) -> int:
    cfg = _load_config(args.config, args.seed)
    resolution = args.resolution if args.resolution else cfg.model.base_resolution
    manifest = synthesize_pairs(
        args.hq_dir,
        args.out_dir,
        args.count,
        cfg.seed,
        cfg.degradation,
        resolution=resolution,
    )
    print(f"wrote {args.count} pairs, manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import Trainer

    cfg = _load_config(args.config, args.seed)
    for dest in ("use_mmrb", "use_local_d", "finetune_prior", "freeze_d"):
        value = getattr(args, dest)
        if value is not None:
            setattr(cfg.train, dest, value)
    cfg.validate()

    pairs_dir = args.pairs_dir or cfg.paths.pairs_dir
    if pairs_dir is None:
        raise ConfigError("no pairs directory: pass --pairs-dir or set paths.pairs_dir")
    out_dir = Path(args.out_dir or cfg.paths.out_dir or "runs")
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        trainer = Trainer.load_checkpoint(
            args.resume,
            pairs_dir=pairs_dir,
            log_path=out_dir / "train_log.jsonl",
            run_config=cfg if args.config else None,
            allow_config_mismatch=args.allow_config_mismatch,
        )
    else:
        trainer = Trainer(cfg, pairs_dir=pairs_dir, log_path=out_dir / "train_log.jsonl")
    reports = trainer.run(checkpoint_dir=out_dir)
    last = reports[-1] if reports else None
    print(
        f"trained to iteration {trainer.iteration}"
        + (f", final total loss {last.total:.4f}" if last else "")
    )
    return EXIT_OK


def _restore_one(trainer, path: Path, out_path: Path, upscale: bool) -> None:
    import torch

    base = trainer.cfg.model.base_resolution
    img = load_image(path, drop_alpha=True)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if img.shape[:2] != (base, base):
        if not upscale:
            raise DataError(
                f"{path}: input is {img.shape[0]}x{img.shape[1]} but the model expects "
                f"{base}x{base}; pass --upscale to resize first"
            )
        img = resize(img, base, base, "bicubic")
    with torch.no_grad():
        fake, _ = trainer.restore(image_to_tensor(img).unsqueeze(0))
    save_image(tensor_to_image(fake), out_path, format="png")


def cmd_restore(args) -> int:
    from .trainer import Trainer

    run_config = _load_config(args.config) if args.config else None
    trainer = Trainer.load_checkpoint(args.checkpoint, run_config=run_config)
    trainer.models.eval_()

    in_path = Path(args.input)
    out_path = Path(args.output)
    if in_path.is_dir():
        files = sorted(
            p for p in in_path.iterdir() if p.suffix.lower() in metrics.IMAGE_SUFFIXES
        )
        if not files:
            raise DataError(f"no images in {in_path}")
        out_path.mkdir(parents=True, exist_ok=True)
        for f in files:
            _restore_one(trainer, f, out_path / (f.stem + ".png"), args.upscale)
        print(f"restored {len(files)} images to {out_path}")
    elif in_path.is_file():
        if out_path.suffix == "":
            out_path.mkdir(parents=True, exist_ok=True)
            out_path = out_path / (in_path.stem + ".png")
        _restore_one(trainer, in_path, out_path, args.upscale)
        print(f"restored {in_path} -> {out_path}")
    else:
        raise DataError(f"input not found: {in_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    niqe_model = None
    if args.niqe_model:
        niqe_model = metrics.NiqeModel.load(args.niqe_model)
    elif args.pristine:
        niqe_model = metrics.niqe_fit(args.pristine, patch_size=args.niqe_patch)

    adapter = None
    if args.deep_extractor == "test":
        adapter = metrics.DeepFeatureAdapter(
            ConvStackExtractor(layers=3, base_channels=8, seed=0),
            ConvStackEmbedding(layers=3, base_channels=8, seed=1),
        )
    elif args.deep_extractor:
        from .trainer import load_extractor_pair

        perceptual, face = load_extractor_pair(args.deep_extractor)
        adapter = metrics.DeepFeatureAdapter(perceptual, face)

    report = metrics.evaluate_dirs(
        args.restored,
        reference_dir=args.reference,
        niqe_model=niqe_model,
        deep_adapter=adapter,
    )
    print(report.to_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "report.txt").write_text(report.to_table() + "\n")
        print(f"reports written to {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synthesize": cmd_synthesize,
        "train": cmd_train,
        "restore": cmd_restore,
        "evaluate": cmd_evaluate,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FaceRestoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""retina-iqa command line.

Exit codes: 0 on success, 1 for usage errors (synopsis on stderr), 2 when a
command fails at run time.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import ablation, bench, crossval, data, evaluate, gradcheck, imageio, imgproc, priors, train
from .config import configure_logging
from .errors import ParseError, RetinaIQAError, UsageError
from .schemas import ModelConfig, PreprocessConfig, QualityLabel, StemVariant, SyntheticParams, TrainConfig

logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, e.msg) from e


def load_train_config(path=None, defaults: dict | None = None, **overrides) -> TrainConfig:
    """TrainConfig from defaults, then an optional JSON file, then non-None overrides.

    When nothing sets lr_decay_epoch, it is clamped to the epoch count.
    """
    raw = _load_json(path) if path else {}
    if not isinstance(raw, dict):
        raise ParseError(path, 1, "config must be a JSON object")
    raw = {**(defaults or {}), **raw, **{k: v for k, v in overrides.items() if v is not None}}
    if "lr_decay_epoch" not in raw and isinstance(raw.get("epochs"), int):
        raw["lr_decay_epoch"] = min(TrainConfig.model_fields["lr_decay_epoch"].default, raw["epochs"])
    return TrainConfig.model_validate(raw)


def _model_config(args, checkpoint: train.Checkpoint) -> ModelConfig:
    if args.config:
        return load_train_config(args.config).network
    return train.resolve_model_config(checkpoint)


def cmd_synth(args) -> int:
    counts = {QualityLabel.GOOD: args.good, QualityLabel.USABLE: args.usable, QualityLabel.REJECT: args.reject}
    params = SyntheticParams(image_size=args.size)
    manifest = data.generate_dataset(args.out, counts, args.seed, params)
    print(f"{len(manifest)} images written to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = PreprocessConfig(target_size=args.size, fov_enabled=not args.no_fov)
    out = imgproc.preprocess(imageio.read_image(args.input), cfg)
    imageio.write_png(args.out, out)
    return 0


def cmd_priors(args) -> int:
    image = imageio.read_image(args.input)
    imageio.write_pgm(args.dark, priors.dark_channel(image, args.radius))
    imageio.write_pgm(args.bright, priors.bright_channel(image, args.radius))
    return 0


def cmd_train(args) -> int:
    cfg = load_train_config(
        args.config, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        lr_decay_epoch=args.lr_decay_epoch, variant=args.variant, init_from=args.init,
    )
    manifest = data.load_manifest(args.manifest)
    root = args.root or Path(args.manifest).parent
    val = data.load_manifest(args.val_manifest) if args.val_manifest else None
    val_root = args.val_root or (Path(args.val_manifest).parent if args.val_manifest else None)
    checkpoint, log = train.train(cfg, manifest, root, val, val_root)
    train.save_checkpoint(checkpoint, args.out)
    if args.log:
        train.write_training_log(log, args.log)
    return 0


def cmd_eval(args) -> int:
    checkpoint = train.load_checkpoint(args.ckpt)
    config = _model_config(args, checkpoint)
    manifest = data.load_manifest(args.manifest)
    root = args.root or Path(args.manifest).parent
    report = train.evaluate_model(checkpoint, manifest, root, config)
    if args.report:
        evaluate.write_report_json(report, args.report)
    sys.stdout.write(evaluate.format_report(report))
    return 0


def cmd_kfold(args) -> int:
    folds = data.kfold_split(data.load_manifest(args.manifest), args.k, args.seed)
    for i, fold in enumerate(folds):
        data.save_manifest(fold.train, f"{args.out_prefix}{i}_train.csv")
        data.save_manifest(fold.validation, f"{args.out_prefix}{i}_val.csv")
        print(f"fold {i}: {len(fold.train)} train, {len(fold.validation)} validation")
    return 0


def cmd_crossval(args) -> int:
    cfg = load_train_config(
        args.config, defaults=crossval.FINE_TUNE_SCHEDULE if args.init else None,
        epochs=args.epochs, batch_size=args.batch_size, variant=args.variant, init_from=args.init,
    )
    manifest = data.load_manifest(args.manifest)
    root = args.root or Path(args.manifest).parent
    result = crossval.cross_validate(cfg, manifest, root, args.k, args.seeds)
    crossval.write_crossval(result, args.out)
    sys.stdout.write(crossval.format_crossval(result))
    return 0


def cmd_gradcam(args) -> int:
    checkpoint = train.load_checkpoint(args.ckpt)
    model = train.restore_model(checkpoint, _model_config(args, checkpoint))
    image = imageio.read_image(args.input)
    heatmap = evaluate.gradcam(model, image, int(QualityLabel.parse(args.target)))
    imageio.write_pgm(args.out, heatmap)
    return 0


def cmd_gradcheck(args) -> int:
    config = ModelConfig().with_variant(args.variant)
    report = gradcheck.gradient_check(config, seed=args.seed, tolerance=args.tolerance,
                                      max_entries=args.max_entries)
    print("\n".join(report.lines()))
    print(f"worst relative error {report.worst:.3e} ({'pass' if report.passed else 'FAIL'})")
    return 0 if report.passed else 2


def cmd_bench(args) -> int:
    result = bench.run_bench(args.size, args.radius, args.repeats)
    print("\n".join(result.lines()))
    if result.speedup < args.min_speedup:
        logger.error("speedup %.2fx below required %.2fx", result.speedup, args.min_speedup)
        return 2
    return 0


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got '{text}'") from None


def cmd_ablate(args) -> int:
    overrides = {
        "seeds": args.seeds, "epochs": args.epochs, "train_count": args.train_count,
        "test_count": args.test_count, "image_size": args.size,
    }
    plan = ablation.AblationPlan.model_validate({k: v for k, v in overrides.items() if v is not None})
    result = ablation.run_ablation(args.out, plan, executor=args.executor, workers=args.workers)
    sys.stdout.write(ablation.format_summary(result))
    if result.direction is not None and not result.direction.holds:
        logger.warning("prior-guided variants did not beat the baseline on this run")
    return 0


def build_parser() -> CliParser:
    parser = CliParser(prog="retina-iqa", description="Retinal image quality toolkit.")
    parser.add_argument("--log-level", default=None, help="override RIQA_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="render a labelled synthetic fundus dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--good", type=int, default=0)
    p.add_argument("--usable", type=int, default=0)
    p.add_argument("--reject", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="detect the field of view, crop, pad and resize")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-fov", action="store_true", help="skip detection and resize the whole frame")
    p.add_argument("--size", type=int, default=224)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("priors", help="write exact dark and bright channel maps")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--dark", required=True)
    p.add_argument("--bright", required=True)
    p.add_argument("--radius", type=int, default=7)
    p.set_defaults(func=cmd_priors)

    p = sub.add_parser("train", help="train a model and write its checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", help="image root (default: the manifest's directory)")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--val-manifest")
    p.add_argument("--val-root")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-decay-epoch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=[v.value for v in StemVariant])
    p.add_argument("--init", help="checkpoint to start from instead of a fresh initialisation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report")
    p.add_argument("--config", help="training config, needed for non-default architectures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kfold", help="write stratified k-fold manifests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_kfold)

    p = sub.add_parser("crossval", help="repeated stratified k-fold training and evaluation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--config")
    p.add_argument("--init", help="fine-tune this checkpoint at a constant 0.001 learning rate")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seeds", type=_seed_list, default=[0])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--variant", choices=[v.value for v in StemVariant])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("gradcam", help="write a Grad-CAM heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--class", dest="target", required=True, choices=[q.slug for q in QualityLabel])
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("gradcheck", help="finite-difference check of every learnable tensor")
    p.add_argument("--variant", default=StemVariant.DARK_BRIGHT.value, choices=[v.value for v in StemVariant])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--max-entries", type=int, default=24)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time the running extremum against the naive loop")
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--radius", type=int, default=7)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--min-speedup", type=float, default=bench.MIN_SPEEDUP)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="compare the four stem variants on synthetic data")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seed_list)
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--executor", choices=["process", "celery"])
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("retina-iqa: a command is required")
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    configure_logging(args.log_level)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return 1
    except (RetinaIQAError, OSError, ValueError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())

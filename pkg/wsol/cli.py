"""
Command-line entry point: synth, train, eval, infer, gradcheck and ablate.

Every command prints its resolved configuration as JSON before doing any work.
Exit codes: 0 success, 1 usage, 2 data, configuration or shape-contract error,
3 numerical failure or failed gradient check.
"""

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
import orjson
from loguru import logger
from PIL import Image

from . import __version__
from . import autodiff as ad
from .autodiff import Tensor
from .config import (
    ABLATION_PRESETS,
    DatasetSpec,
    EvalConfig,
    LossConfig,
    LossTerm,
    ModelConfig,
    Settings,
    TrainConfig,
    apply_config_file,
    get_settings,
    parse_config_file,
    validated,
    with_overrides,
)
from .data import generate, load, num_classes_of, read_image, strip_boxes
from .evaluation import (
    binarize,
    evaluate,
    extract_box,
    predict,
    report_medians,
    save_pgm,
    write_metrics,
)
from .exceptions import DataLoadError, UsageError, WsolException
from .gradcheck import run_gradcheck
from .log import configure_logging, log_event
from .model import ClassSelect, forward, init
from .train import Checkpoint, load_checkpoint, save_checkpoint, train, write_log


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _print_config(command: str, sections: Dict[str, Any]) -> None:
    payload = orjson.dumps({"command": command, **sections}, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)
    print(payload.decode("utf-8"), flush=True)


def _loss_from_args(args: argparse.Namespace, base: LossConfig) -> LossConfig:
    loss = base
    if getattr(args, "preset", None):
        loss = LossConfig.preset(args.preset).model_copy(
            update={"thresholds": base.thresholds, "gamma": base.gamma, "epsilon": base.epsilon,
                    "bas_detach_classifier": base.bas_detach_classifier}
        )
    if args.disable:
        loss = loss.without(*(LossTerm(t) for t in args.disable))
    return loss


def _resolve_training(args: argparse.Namespace, samples) -> tuple:
    """defaults < config file < flags; geometry not pinned by the config file follows the data."""
    model, loss, train_config = ModelConfig(), LossConfig(), TrainConfig()
    explicit = set()
    if args.config:
        explicit = {key for _, key, _ in parse_config_file(args.config)}
        model, loss, train_config = apply_config_file(args.config, model, loss, train_config)

    size = samples[0].image.shape[-1]
    classes = num_classes_of(samples)
    model = with_overrides(
        model,
        input_size=None if "input_size" in explicit else size,
        num_classes=None if "num_classes" in explicit else max(classes, 2),
        feature_channels=args.feature_channels,
        seed=args.seed,
    )
    _check_compatible(model, samples, args.data)
    train_config = with_overrides(
        train_config,
        epochs=args.epochs,
        seed=args.seed,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        lr_decay_epochs=args.lr_decay_epochs,
    )
    return model, _loss_from_args(args, loss), train_config


def _check_compatible(model: ModelConfig, samples, where) -> None:
    classes = num_classes_of(samples)
    if classes > model.num_classes:
        raise DataLoadError(str(where), f"labels reach class {classes - 1} but the model has {model.num_classes} classes")
    shapes = {s.image.shape for s in samples}
    expected = (3, model.input_size, model.input_size)
    if shapes != {expected}:
        raise DataLoadError(str(where), f"images must all be {expected[1]}x{expected[2]}, found {sorted(shapes)}")


def cmd_synth(args: argparse.Namespace, settings: Settings) -> int:
    spec = validated(
        DatasetSpec,
        {
            "num_classes": args.classes,
            "samples_per_class": args.per_class,
            "image_size": args.size,
            "noise_level": args.noise,
            "seed": args.seed,
        },
    )
    _print_config("synth", {"dataset": spec.model_dump(), "out": str(args.out)})
    try:
        generate(spec, args.out)
    except OSError as e:
        raise DataLoadError(str(args.out), f"unwritable: {e}")
    return 0


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    samples = strip_boxes(load(args.data))
    velocity: Dict[str, np.ndarray] = {}
    start_epoch = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model = ckpt.model_config
        _check_compatible(model, samples, args.data)
        _, loss, train_config = _resolve_training(args, samples)
        train_config = with_overrides(train_config, seed=ckpt.seed if args.seed is None else args.seed)
        net = ckpt.to_net()
        velocity, start_epoch = ckpt.velocity, ckpt.epoch
    else:
        model, loss, train_config = _resolve_training(args, samples)
        net = init(model)

    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    _print_config(
        "train",
        {
            "model": model.model_dump(),
            "loss": loss.summary(),
            "train": train_config.model_dump(),
            "data": str(args.data),
            "out": str(args.out),
            "log": str(log_path),
            "resume_epoch": start_epoch,
        },
    )
    result = train(net, samples, train_config, loss, velocity, start_epoch)
    save_checkpoint(Checkpoint.from_result(result, train_config, loss), args.out)
    write_log(result.log, log_path)
    for entry in result.log:
        print(entry.to_line())
    log_event("info", "Training finished", epochs=result.epoch, checkpoint=str(args.out))
    return 0


def cmd_eval(args: argparse.Namespace, settings: Settings) -> int:
    config = validated(EvalConfig, {"theta": args.theta, "iou_threshold": args.iou_threshold, "sweep": args.sweep})
    ckpt = load_checkpoint(args.ckpt)
    samples = load(args.data)
    _check_compatible(ckpt.model_config, samples, args.data)
    metrics_path = Path(args.metrics) if args.metrics else Path(str(args.ckpt) + ".metrics.txt")
    _print_config(
        "eval",
        {
            "eval": config.model_dump(),
            "model": ckpt.model_config.model_dump(),
            "data": str(args.data),
            "metrics": str(metrics_path),
            "threads": settings.threads,
        },
    )

    net = ckpt.to_net()
    predictions = predict(net, samples, ClassSelect.GROUND_TRUTH, config.batch_size, settings.threads)
    report = evaluate(samples, predictions, config.iou_threshold, config.theta)
    if args.heatmaps:
        out = Path(args.heatmaps)
        out.mkdir(parents=True, exist_ok=True)
        for i, pred in enumerate(predictions):
            save_pgm(pred.heatmap, out / f"{i:05d}.pgm")

    print(report.to_json().decode("utf-8") if args.json else report.to_table(config.sweep))
    write_metrics(report, metrics_path, config.sweep)
    return 0


def cmd_infer(args: argparse.Namespace, settings: Settings) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model_config
    if args.class_id is not None and not 0 <= args.class_id < model.num_classes:
        raise UsageError(f"--class must be in [0, {model.num_classes}), got {args.class_id}")
    theta = validated(EvalConfig, {"theta": args.theta}).theta
    _print_config(
        "infer",
        {
            "model": model.model_dump(),
            "image": str(args.image),
            "out": str(args.out),
            "class": args.class_id,
            "theta": theta,
        },
    )

    try:
        pixels = read_image(Path(args.image))
    except OSError as e:
        raise DataLoadError(str(args.image), f"unreadable image: {e}")
    height, width = pixels.shape[:2]
    size = model.input_size
    if (height, width) != (size, size):
        pixels = np.asarray(Image.fromarray(pixels).resize((size, size), Image.Resampling.BILINEAR))
    image = Tensor(pixels.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)

    net = ckpt.to_net()
    if args.class_id is None:
        bundle = forward(net, image, ClassSelect.PREDICTED)
    else:
        bundle = forward(net, image, ClassSelect.GROUND_TRUTH, [args.class_id])
    heatmap = ad.bilinear_upsample(bundle.foreground, height, width).data[0, 0]
    box = extract_box(heatmap, theta)
    save_pgm(heatmap, args.out)
    if args.mask_out:
        save_pgm(binarize(heatmap, theta), args.mask_out)

    predicted = int(np.argmax(bundle.probs.data[0]))
    print(f"predicted_class {predicted} prob {bundle.probs.data[0, predicted]:.6f}")
    print(f"heatmap_class {int(bundle.classes[0])}")
    print(f"box {box.x0} {box.y0} {box.x1} {box.y1}")
    return 0


def cmd_gradcheck(args: argparse.Namespace, settings: Settings) -> int:
    _print_config("gradcheck", {"seed": args.seed})
    report = run_gradcheck(args.seed)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 3


def cmd_ablate(args: argparse.Namespace, settings: Settings) -> int:
    samples = load(args.data)
    presets = args.presets or list(ABLATION_PRESETS)
    seeds = list(range(args.seeds))
    eval_config = validated(EvalConfig, {"theta": args.theta})
    args.disable, args.lr, args.batch_size, args.lr_decay_epochs = [], None, None, None

    rows = []
    for preset in presets:
        reports = []
        for seed in seeds:
            args.preset, args.seed = preset, seed
            model, loss, train_config = _resolve_training(args, strip_boxes(samples))
            if seed == seeds[0]:
                _print_config("ablate", {"preset": preset, "seeds": seeds, "model": model.model_dump(),
                                         "loss": loss.summary(), "train": train_config.model_dump()})
            result = train(init(model), strip_boxes(samples), train_config, loss)
            predictions = predict(result.net, samples, ClassSelect.GROUND_TRUTH, eval_config.batch_size, settings.threads)
            reports.append(evaluate(samples, predictions, eval_config.iou_threshold, eval_config.theta))
        rows.append((preset, report_medians(reports)))

    print(f"{'preset':<16}{'top1':>8}{'top5':>8}{'gt_known':>10}{'miou':>8}")
    for preset, m in rows:
        print(f"{preset:<16}{m['top1']:>8.4f}{m['top5']:>8.4f}{m['gt_known']:>10.4f}{m['miou']:>8.4f}")
    return 0


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, type=Path, help="dataset directory")
    parser.add_argument("--config", type=Path, help="key = value config file")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--feature-channels", type=int)
    parser.add_argument("--theta", type=float, default=0.45)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wsol", description="Desk-scale weakly-supervised object localization")
    parser.add_argument("--version", action="version", version=f"wsol {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    terms = [t.value for t in LossTerm]

    p = sub.add_parser("synth", help="write a synthetic-shapes dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    _add_training_flags(p)
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--log", type=Path, help="per-epoch log (default: <out>.log)")
    p.add_argument("--disable", action="append", default=[], choices=terms, metavar="TERM")
    p.add_argument("--preset", choices=sorted(ABLATION_PRESETS))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-decay-epochs", type=int)
    p.add_argument("--resume", type=Path, metavar="CKPT")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset with boxes")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--theta", type=float, default=0.45)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--metrics", type=Path, help="metrics file (default: <ckpt>.metrics.txt)")
    p.add_argument("--heatmaps", type=Path, help="directory for per-sample heatmap PGMs")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("infer", help="heatmap, class and box for one image")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--class", dest="class_id", type=int)
    p.add_argument("--theta", type=float, default=0.45)
    p.add_argument("--mask-out", type=Path)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss terms")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate the loss-term ablation presets")
    _add_training_flags(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--presets", nargs="+", choices=sorted(ABLATION_PRESETS))
    p.set_defaults(handler=cmd_ablate, epochs=30)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    try:
        settings = get_settings()
        configure_logging(settings.log_level, settings.log_json)
        args = build_parser().parse_args(argv)
        return args.handler(args, settings)
    except WsolException as e:
        logger.bind(**e.to_dict()).error(f"{type(e).__name__}: {e.message}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

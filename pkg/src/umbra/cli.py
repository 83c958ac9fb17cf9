"""Command line interface.

Subcommands: train-svm, train-cnn, detect, evaluate, synth, bench.
Flags may also be supplied through a flat ``key = value`` config file
(--config); explicit flags override file values. Verbosity is set by the
UMBRA_LOG environment variable (DEBUG/INFO/WARNING/ERROR). Exit codes:
0 success, 1 usage error, 2 runtime error.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_meanshift_flags(p):
    p.add_argument("--h-s", type=float, default=8.0,
                   help="mean-shift spatial bandwidth in pixels (default 8)")
    p.add_argument("--h-r", type=float, default=8.0,
                   help="mean-shift range bandwidth in Lab units (default 8)")
    p.add_argument("--min-region-size", type=int, default=50,
                   help="regions below this pixel count are merged (default 50)")


def _add_split_flags(p):
    p.add_argument("--split", choices=["all", "train", "test"], default="all",
                   help="use the whole dataset or one side of a seeded split")
    p.add_argument("--test-fraction", type=float, default=0.25,
                   help="test share of the seeded split (default 0.25)")
    p.add_argument("--split-seed", type=int, default=0,
                   help="seed of the train/test split (default 0)")


def _add_detector_flags(p):
    p.add_argument("--alpha", type=float, default=0.2,
                   help="region filter threshold: keep s_i >= alpha*max (default 0.2)")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="binarization threshold on the refined map (default 0.5)")


def build_parser() -> _Parser:
    parser = _Parser(prog="umbra", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="command")

    common = dict(config=lambda p: p.add_argument(
        "--config", type=Path, default=None,
        help="flat 'key = value' file; keys are long flag names, flags override"))

    p = sub.add_parser("train-svm", help="train the region shadow prior SVM")
    common["config"](p)
    p.add_argument("--data", type=Path, required=True, help="dataset root directory")
    p.add_argument("--layout", default="images-masks",
                   choices=["images-masks", "sbu"], help="dataset directory layout")
    p.add_argument("--out", type=Path, required=True, help="output model path")
    p.add_argument("--C", dest="c", type=float, default=1.0, help="SVM slack parameter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texton-k", type=int, default=64, help="texton dictionary size")
    _add_meanshift_flags(p)
    _add_split_flags(p)

    p = sub.add_parser("train-cnn", help="train the RGBP patch network")
    common["config"](p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--layout", default="images-masks", choices=["images-masks", "sbu"])
    p.add_argument("--svm", type=Path, required=True, help="trained prior model")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--per-class", type=int, default=50,
                   help="patches drawn per class per image before balancing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01, help="SGD learning rate")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    _add_meanshift_flags(p)
    _add_split_flags(p)

    p = sub.add_parser("detect", help="detect shadows in one image")
    common["config"](p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--svm", type=Path, required=True)
    p.add_argument("--cnn", type=Path, required=True)
    p.add_argument("--out-prob", type=Path, default=None,
                   help="write the refined probability map (8-bit gray PNG)")
    p.add_argument("--out-mask", type=Path, default=None,
                   help="write the binary mask ({0,255} PNG)")
    p.add_argument("--dump-stages", type=Path, default=None,
                   help="directory for prior/region/refined/mask stage images")
    p.add_argument("--timing", choices=["json"], default=None,
                   help="print per-stage durations and cnn_invocations to stdout")
    _add_detector_flags(p)
    _add_meanshift_flags(p)

    p = sub.add_parser("evaluate", help="accuracy + timing over a labeled dataset")
    common["config"](p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--layout", default="images-masks", choices=["images-masks", "sbu"])
    p.add_argument("--svm", type=Path, required=True)
    p.add_argument("--cnn", type=Path, required=True)
    p.add_argument("--report", type=Path, default=None,
                   help="summary JSON path; .lines.txt, .timing.json and figures "
                        "are written alongside")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p.add_argument("--jobs", type=int, default=1, help="parallel image workers")
    _add_detector_flags(p)
    _add_meanshift_flags(p)
    _add_split_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic shadow dataset")
    common["config"](p)
    p.add_argument("--n", type=int, required=True, help="number of image/mask pairs")
    p.add_argument("--size", type=int, default=128, help="square image size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")

    p = sub.add_parser("bench", help="timing and CNN-invocation run (no masks needed)")
    common["config"](p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--layout", default="flat", choices=["flat", "images-masks", "sbu"])
    p.add_argument("--svm", type=Path, required=True)
    p.add_argument("--cnn", type=Path, required=True)
    p.add_argument("--report", type=Path, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    _add_detector_flags(p)
    _add_meanshift_flags(p)

    return parser


def _parse_config_file(path: Path) -> dict:
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _apply_config(parser, args, argv):
    if not getattr(args, "config", None):
        return args
    values = _parse_config_file(args.config)
    sub_actions = next(
        a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
    )
    sub = sub_actions.choices[args.command]
    by_flag = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                by_flag[opt[2:]] = action
    explicit = {tok.split("=", 1)[0][2:] for tok in argv if tok.startswith("--")}
    for key, raw in values.items():
        action = by_flag.get(key)
        if action is None:
            raise UsageError(f"{args.config}: unknown config key {key!r} for {args.command}")
        if key in explicit:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes")
        elif action.type is not None:
            try:
                value = action.type(raw)
            except ValueError as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}") from exc
        else:
            value = raw
        if action.choices and value not in action.choices:
            raise UsageError(f"{args.config}: {key} must be one of {action.choices}")
        setattr(args, action.dest, value)
    return args


def _meanshift_params(args):
    from .segmentation import MeanShiftParams

    return MeanShiftParams(
        spatial_bandwidth=args.h_s,
        range_bandwidth=args.h_r,
        min_region_size=args.min_region_size,
    )


def _detector_config(args):
    from .detector import DetectorConfig

    return DetectorConfig(
        alpha=args.alpha,
        binarize_threshold=args.threshold,
        mean_shift=_meanshift_params(args),
    )


def _load_index(args):
    from .evaluation import load_dataset, split_index

    index = load_dataset(args.data, args.layout)
    split = getattr(args, "split", "all")
    if split == "all":
        return index
    train, test = split_index(index, args.test_fraction, args.split_seed)
    return train if split == "train" else test


def _cmd_train_svm(args):
    from .prior import save_svm_model
    from .training import train_svm_from_dataset

    index = _load_index(args)
    model = train_svm_from_dataset(
        index, _meanshift_params(args), texton_k=args.texton_k, c=args.c, seed=args.seed
    )
    save_svm_model(model, args.out)
    print(f"svm model written to {args.out} "
          f"({model.support_vectors.shape[0]} support vectors, gamma={model.gamma:.4f})")
    return 0


def _cmd_train_cnn(args):
    from .cnn import TrainingSchedule, save_cnn_model
    from .prior import load_svm_model
    from .training import train_cnn_from_dataset

    index = _load_index(args)
    svm_model = load_svm_model(args.svm)
    schedule = TrainingSchedule(
        epochs=args.epochs, learning_rate=args.lr,
        momentum=args.momentum, batch_size=args.batch_size,
    )
    model = train_cnn_from_dataset(
        index, svm_model, _meanshift_params(args),
        per_class=args.per_class, seed=args.seed, schedule=schedule,
    )
    save_cnn_model(model, args.out)
    print(f"cnn model written to {args.out} "
          f"(final training loss {model.meta['final_loss']:.4f})")
    return 0


def _cmd_detect(args):
    from .cnn import load_cnn_model
    from .detector import detect
    from .imageio import load_image, probability_to_gray, save_image
    from .prior import load_svm_model

    img = load_image(args.image)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    svm_model = load_svm_model(args.svm)
    cnn_model = load_cnn_model(args.cnn)
    result = detect(img, svm_model, cnn_model, _detector_config(args))

    if args.out_prob:
        save_image(probability_to_gray(result.refined_map), args.out_prob)
    if args.out_mask:
        save_image(result.mask, args.out_mask)
    if args.dump_stages:
        from .imageio import save_label_map

        args.dump_stages.mkdir(parents=True, exist_ok=True)
        save_image(probability_to_gray(result.prior), args.dump_stages / "prior.png")
        save_image(probability_to_gray(result.region_map), args.dump_stages / "region.png")
        save_image(probability_to_gray(result.refined_map), args.dump_stages / "refined.png")
        save_image(result.mask, args.dump_stages / "mask.png")
        save_label_map(result.segmentation.labels, args.dump_stages / "labels.png")
    if args.timing == "json":
        payload = dict(result.timing)
        payload["cnn_invocations"] = result.cnn_invocations
        payload["regions"] = int(result.segmentation.region_count)
        print(json.dumps(payload, sort_keys=True))
    return 0


def _run_benchmark(args, require_masks):
    from .cnn import load_cnn_model
    from .evaluation import benchmark
    from .prior import load_svm_model
    from .report import format_lines, format_timing_lines, write_report

    index = _load_index(args)
    if require_masks and any(m is None for _, m in index.pairs):
        raise ValueError("evaluate requires a layout with ground-truth masks")
    svm_model = load_svm_model(args.svm)
    cnn_model = load_cnn_model(args.cnn)
    report = benchmark(
        index, svm_model, cnn_model, _detector_config(args), jobs=args.jobs
    )
    for line in format_lines(report) + format_timing_lines(report):
        print(line)
    if args.report:
        written = write_report(report, args.report, figures=not args.no_figures)
        print("report files: " + " ".join(str(p) for p in written), file=sys.stderr)
    return 0


def _cmd_synth(args):
    from .evaluation import generate_synthetic

    index = generate_synthetic(args.n, args.size, args.seed, args.out)
    print(f"wrote {len(index.pairs)} image/mask pairs under {args.out}")
    return 0


_COMMANDS = {
    "train-svm": _cmd_train_svm,
    "train-cnn": _cmd_train_cnn,
    "detect": _cmd_detect,
    "evaluate": lambda a: _run_benchmark(a, require_masks=True),
    "bench": lambda a: _run_benchmark(a, require_masks=False),
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("UMBRA_LOG", "WARNING").upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        args = _apply_config(parser, args, argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except Exception as exc:  # runtime failure, not a usage problem
        print(f"error: {exc}", file=sys.stderr)
        if os.environ.get("UMBRA_LOG", "").upper() == "DEBUG":
            import traceback

            traceback.print_exc()
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

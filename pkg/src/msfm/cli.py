"""Command-line entry point: ``msfm {gen,train,eval,gradcheck,ablate,report}``.

Result lines go to stdout; progress and diagnostics go to stderr.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from msfm import evaluation
from msfm.gradcheck import TOLERANCE, run_gradcheck
from msfm.inference import detect, write_detections_csv
from msfm.model import load_checkpoint, save_checkpoint
from msfm.synthdata import (
    ConfigError,
    DatasetFormatError,
    GeneratorConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
    subset_by_name,
)
from msfm.trainer import (
    GRIDS,
    DivergenceError,
    TrainConfig,
    TrainConfigError,
    TrainHistory,
    ablate,
    load_train_config,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("msfm")

PRESETS = {"default": GeneratorConfig, "occluder_heavy": GeneratorConfig.occluder_heavy}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit(2)
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _subset(name: str):
    try:
        return subset_by_name(name)
    except KeyError as exc:
        raise argparse.ArgumentTypeError(exc.args[0]) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msfm", description="Dual-branch occluded-pedestrian detector on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset file")
    p.add_argument("--config", default="occluder_heavy", help="preset name (default, occluder_heavy) or JSON file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=200, help="number of scenes")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TrainConfig as JSON or key=value lines")
    p.add_argument("--val", help="validation dataset for per-epoch MR")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--history", help="where to write the training history JSON")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subset", type=_subset, default=subset_by_name("R"), help="R, HO or R+HO")
    p.add_argument("--config", help="TrainConfig supplying inference settings")
    p.add_argument("--csv", help="write a metric report CSV")
    p.add_argument("--detections", help="dump detections CSV")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=1, help="check seeds seed .. seed+n-1")
    p.add_argument("--tolerance", type=float, default=TOLERANCE)

    p = sub.add_parser("ablate", help="train a configuration grid over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="validation dataset (default: last 20%% of --data)")
    p.add_argument("--grid", choices=sorted(GRIDS), required=True)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (0 .. k-1)")
    p.add_argument("--config", help="base TrainConfig")
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("report", help="render loss and MR curves as SVG")
    p.add_argument("--history", required=True)
    p.add_argument("--out-dir", default=".")
    return parser


def _read_dataset(path: str):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"--data: no such file {path}") from None
    except (DatasetFormatError, ConfigError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _read_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        return load_train_config(path)
    except FileNotFoundError:
        raise DataError(f"--config: no such file {path}") from None
    except (TrainConfigError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_gen(args) -> int:
    if args.config in PRESETS:
        cfg = PRESETS[args.config]()
    else:
        try:
            cfg = GeneratorConfig.from_dict(json.loads(Path(args.config).read_text()))
            cfg.validate()
        except FileNotFoundError:
            raise DataError(f"--config: no such file or preset {args.config}") from None
        except (json.JSONDecodeError, ConfigError, TypeError) as exc:
            raise DataError(f"{args.config}: {exc}") from None
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    scenes = generate_dataset(cfg, args.n, args.seed)
    save_dataset(scenes, args.out, cfg)
    logger.info("wrote %d scenes to %s", len(scenes), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    scenes = _read_dataset(args.data)
    val = _read_dataset(args.val) if args.val else None
    cfg = _read_config(args.config)
    try:
        hist = train(scenes, cfg, val)
    except TrainConfigError as exc:
        raise DataError(f"--config: {exc}") from None
    save_checkpoint(hist.params, args.out_checkpoint)
    if args.history:
        hist.save(args.history)
    logger.info("saved checkpoint to %s", args.out_checkpoint)
    return EXIT_OK


def cmd_eval(args) -> int:
    scenes = _read_dataset(args.data)
    try:
        params = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, OSError, ValueError, KeyError) as exc:
        raise DataError(f"--checkpoint {args.checkpoint}: {exc}") from None
    cfg = _read_config(args.config)
    results = [(s.id, detect(s, params, cfg.inference_config())) for s in scenes]
    per_image = [(dets, s.annotations) for (_, dets), s in zip(results, scenes)]
    try:
        mr, c = evaluation.evaluate(per_image, args.subset)
    except evaluation.NoTargetsError as exc:
        raise DataError(f"--data {args.data}: {exc}") from None
    print(evaluation.format_mr(args.subset.name, mr))
    if args.csv:
        name = Path(args.checkpoint).stem
        evaluation.write_metric_report(args.csv, [(name, args.subset.name, mr, c.n_images, c.n_targets)])
    if args.detections:
        write_detections_csv(args.detections, results)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.dim < 1 or args.n_seeds < 1:
        raise UsageError("--dim and --n-seeds must be positive")
    worst = run_gradcheck(args.dim, range(args.seed, args.seed + args.n_seeds), args.tolerance)
    for term, err in worst.items():
        print(f"{term} {err:.3e}")
    failed = [t for t, e in worst.items() if not e < args.tolerance]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args) -> int:
    scenes = _read_dataset(args.data)
    if args.val:
        train_scenes, val = scenes, _read_dataset(args.val)
    else:
        cut = int(round(0.8 * len(scenes)))
        train_scenes, val = scenes[:cut], scenes[cut:]
    if not train_scenes or not val:
        raise DataError(f"--data {args.data}: need scenes for both training and validation")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    base = _read_config(args.config)
    try:
        res = ablate(train_scenes, val, base, GRIDS[args.grid], list(range(args.seeds)))
    except TrainConfigError as exc:
        raise DataError(f"--config: {exc}") from None
    res.write_csv(args.out if args.out else sys.stdout)
    return EXIT_OK


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    try:
        hist = TrainHistory.load(args.history)
    except FileNotFoundError:
        raise DataError(f"--history: no such file {args.history}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{args.history}: {exc}") from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(7, 4))
    steps = np.arange(len(hist.steps))
    for term in ("total", "rpn_cls", "rpn_reg", "fb_cls", "fb_reg", "vb_cls", "msfmm", "vb_reg"):
        vals = np.array([s.as_dict()[term] for s in hist.steps])
        if vals.size and np.any(vals):
            ax.plot(steps, vals, label=term, lw=1.5 if term == "total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    loss_path = out / "loss_curves.svg"
    fig.savefig(loss_path, format="svg")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    if hist.epoch_mr:
        for name in hist.epoch_mr[0]:
            ax.plot(np.arange(1, len(hist.epoch_mr) + 1), [100 * m[name] for m in hist.epoch_mr], marker="o", label=name)
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("log-avg MR (%)")
    fig.tight_layout()
    mr_path = out / "mr_vs_epoch.svg"
    fig.savefig(mr_path, format="svg")
    plt.close(fig)
    logger.info("wrote %s and %s", loss_path, mr_path)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())

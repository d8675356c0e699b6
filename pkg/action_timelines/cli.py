import argparse
import contextlib
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

from .ablation import ABLATIONS, run_ablation
from .checkpoint import load_detector
from .config import ACTIVITYNET_THRESHOLDS, THUMOS_THRESHOLDS, RunConfig, load_config
from .dataset import (
    ActionDataset,
    SyntheticSpec,
    atomic_write,
    generate_synthetic,
    read_annotations,
    read_predictions,
    write_predictions,
)
from .evaluation import evaluate
from .exceptions import ActionTimelinesError
from .renderer import DetectionTimelineRenderer
from .sampler import SamplingPlan, predict_dataset
from .training import train

__all__ = ["main", "build_parser"]

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="run seed (overrides the config)")
    parser.add_argument("--config", type=Path, default=None, help="INI-style configuration file")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    parser.add_argument("--progress", action="store_true", help="show progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="action-timelines", description="Temporal action detection by proposal denoising"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("make-synth", help="generate a synthetic dataset")
    _common(synth)
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--videos", type=int, default=16)
    synth.add_argument("--snippets", type=int, default=96)
    synth.add_argument("--feat-dim", type=int, default=32)
    synth.add_argument("--classes", type=int, default=4)
    synth.add_argument("--max-actions", type=int, default=3)
    synth.add_argument("--strength", type=float, default=1.0)
    synth.add_argument("--noise", type=float, default=1.0)

    tr = sub.add_parser("train", help="train a detector")
    _common(tr)
    tr.add_argument("--data", type=Path, default=None)
    tr.add_argument("--out", type=Path, default=None, help="output directory for checkpoint and metrics log")

    sm = sub.add_parser("sample", help="detect actions with a trained checkpoint")
    _common(sm)
    sm.add_argument("--checkpoint", type=Path, required=True)
    sm.add_argument("--data", type=Path, required=True)
    sm.add_argument("--out", type=Path, required=True, help="prediction file")
    sm.add_argument("--steps", type=int, default=None)
    sm.add_argument("--proposals", type=int, default=None)
    sm.add_argument("--gamma", type=float, default=None)
    sm.add_argument("--no-sc", action="store_true", help="disable selective conditioning")
    sm.add_argument("--no-id", action="store_true", help="disable iterative denoising")
    sm.add_argument("--nms", type=float, nargs="?", const=0.5, default=None, metavar="IOU", help="apply NMS")

    ev = sub.add_parser("eval", help="score predictions against annotations")
    _common(ev)
    ev.add_argument("--predictions", type=Path, required=True)
    ev.add_argument("--annotations", type=Path, required=True)
    ev.add_argument("--out", type=Path, default=None, help="report file; metrics go next to it")
    ev.add_argument("--grid", choices=("thumos", "activitynet", "config"), default="config")

    ab = sub.add_parser("ablate", help="run a scripted sweep")
    _common(ab)
    ab.add_argument("name", choices=sorted(ABLATIONS))
    ab.add_argument("--data", type=Path, required=True)
    ab.add_argument("--out", type=Path, default=None)

    rd = sub.add_parser("render", help="draw detections of one video as an HTML timeline")
    _common(rd)
    rd.add_argument("--annotations", type=Path, required=True)
    rd.add_argument("--predictions", type=Path, required=True)
    rd.add_argument("--video", required=True)
    rd.add_argument("--out", type=Path, required=True)
    rd.add_argument("--top-k", type=int, default=20)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config.override("seed", args.seed)
    return config.validate()


def _make_synth(args: argparse.Namespace, outputs: list) -> None:
    config = _load(args)
    spec = SyntheticSpec(
        num_videos=args.videos,
        num_snippets=args.snippets,
        feature_dim=args.feat_dim,
        num_classes=args.classes,
        max_actions=args.max_actions,
        strength=args.strength,
        noise=args.noise,
        seed=config.seed,
    )
    _claim(outputs, args.out)
    generate_synthetic(spec, args.out)


def _train(args: argparse.Namespace, outputs: list) -> None:
    config = _load(args)
    if args.data is not None:
        config.paths.data_dir = str(args.data)
    if args.out is not None:
        config.paths.output_dir = str(args.out)
    dataset = ActionDataset.load(config.paths.data_dir)
    _claim(outputs, config.paths.checkpoint, config.paths.metrics_log)
    result = train(config, dataset, config.paths.output_dir, progress=args.progress)
    logger.info("trained %d steps, final loss %.4f", result.steps, result.final_loss)


def _sample(args: argparse.Namespace, outputs: list) -> None:
    detector, config = load_detector(args.checkpoint)
    if args.config is not None:
        overrides = load_config(args.config)
        overrides.model = config.model
        config = overrides
    if args.seed is not None:
        config.override("seed", args.seed)
    if args.steps is not None:
        config.override("sample.steps", args.steps)
    if args.proposals is not None:
        config.override("sample.num_proposals", args.proposals)
    if args.gamma is not None:
        config.override("sample.gamma", args.gamma)
    if args.no_sc:
        config.override("sample.selective_conditioning", False)
    if args.no_id:
        config.override("sample.iterative_denoising", False)
    if args.nms is not None:
        config.override("sample.nms", True)
        config.override("sample.nms_threshold", args.nms)
    config.validate()
    dataset = ActionDataset.load(args.data)
    _claim(outputs, args.out)
    plan = SamplingPlan.from_config(config.sample)
    predictions = predict_dataset(detector, dataset, config, plan, progress=args.progress)
    write_predictions(predictions, args.out, config.to_ini())


def _eval(args: argparse.Namespace, outputs: list) -> None:
    config = _load(args)
    grids = {"thumos": THUMOS_THRESHOLDS, "activitynet": ACTIVITYNET_THRESHOLDS}
    thresholds = grids.get(args.grid, config.eval.thresholds)
    predictions, echo = read_predictions(args.predictions)
    gts = [gt for video in read_annotations(args.annotations) for gt in video.ground_truth()]
    report = evaluate(predictions, gts, thresholds, config.eval.ar_budgets, config.eval.ar_iou_grid)
    if args.out is None:
        sys.stdout.write(report.to_text())
        return
    metrics = args.out.with_name(args.out.name + ".metrics")
    _claim(outputs, args.out, metrics)
    with atomic_write(args.out) as handle:
        handle.write(report.to_text())
        if echo:
            handle.write("\n" + "".join("# {}\n".format(line) for line in echo.splitlines()))
    with atomic_write(metrics) as handle:
        handle.write(report.to_metrics_text())


def _ablate(args: argparse.Namespace, outputs: list) -> None:
    config = _load(args)
    dataset = ActionDataset.load(args.data)
    table = run_ablation(args.name, config, dataset, progress=args.progress)
    if args.out is None:
        sys.stdout.write(table.to_text())
        return
    _claim(outputs, args.out)
    with atomic_write(args.out) as handle:
        handle.write(table.to_text())
        handle.write("".join("# {}\n".format(line) for line in config.to_ini().splitlines()))


def _render(args: argparse.Namespace, outputs: list) -> None:
    videos = {v.video_id: v for v in read_annotations(args.annotations)}
    if args.video not in videos:
        raise ActionTimelinesError("video {!r} not in {}".format(args.video, args.annotations))
    predictions, _ = read_predictions(args.predictions)
    _claim(outputs, args.out)
    DetectionTimelineRenderer(videos[args.video], predictions, top_k=args.top_k).output_timeline(str(args.out))


COMMANDS = {
    "make-synth": _make_synth,
    "train": _train,
    "sample": _sample,
    "eval": _eval,
    "ablate": _ablate,
    "render": _render,
}


def _claim(outputs: list, *paths) -> None:
    """Register outputs this run creates; files that already exist are left alone on failure"""
    outputs.extend(Path(p) for p in paths if not Path(p).exists())


def _remove(paths: Sequence[Path]) -> None:
    for path in paths:
        if path.is_dir():
            shutil.rmtree(path, ignore_errors=True)
        else:
            with contextlib.suppress(FileNotFoundError):
                path.unlink()


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the ``action-timelines`` command

    Returns:
        int: 0 on success, 1 on any failure (after removing partial outputs)
    """
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    outputs: list = []
    try:
        COMMANDS[args.command](args, outputs)
    except (ActionTimelinesError, OSError) as error:
        _remove(outputs)
        print("error: {}".format(error), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line entry point.

    python cli.py <group> <action> [--config FILE] [--set key=value ...] [options]

Groups and actions:

    phantom gen      generate the train/val/test phantoms into data_dir
    drr render       render every configured angle of every phantom
    seg train        pretrain the segmentation network on the train split
    recon train      train one reconstruction model (--views, --lambda, --resume)
    recon infer      reconstruct cases from stored views with a checkpoint
    eval metrics     score a volume pair, or every trained model on the test split
    eval dose        isocenter dose comparison for a volume pair or the test split
    eval report      rebuild summary.csv and report.html from existing CSVs
    pipeline run     every stage above in order

Exit status: 0 success, 2 usage, 3 data, 4 numeric failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

import fileio
import pipeline
from config import RunConfig, load_config
from dose import PlanSpec, compare_dose, dose_rows
from geometry import default_view_subset
from metrics import evaluate_case
from recon_model import ReconModel
from segmentation import SegModel
from trainer import BEST_FILE
from utils import DataError, S2CTError, UsageError, case_name, configure_logging, parse_float_list
from volume import LabeledVolume, Volume, VolumeKind

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace, RunConfig], None]


def _parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value
    return overrides


def _lambda_from_args(args: argparse.Namespace, cfg: RunConfig) -> float:
    lam = cfg.lambdas[0] if args.lam is None else args.lam
    if lam < 0:
        raise UsageError(f"lambda must be >= 0, got {lam:g}")
    return lam


def _truth_from_args(args: argparse.Namespace) -> LabeledVolume:
    hu = fileio.read_volume(args.truth)
    if args.labels:
        labels = fileio.read_volume(args.labels)
    else:
        labels = Volume(np.zeros(hu.shape, dtype=np.uint8), hu.spacing, VolumeKind.LABELS)
    try:
        return LabeledVolume(hu, labels, args.case)
    except ValueError as exc:
        raise DataError(f"{args.truth}: {exc}")


def _output(args: argparse.Namespace, cfg: RunConfig, default_name: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.out_dir) / default_name


# --- handlers -------------------------------------------------------------

def cmd_phantom_gen(args: argparse.Namespace, cfg: RunConfig) -> None:
    pipeline.generate_stage(cfg)


def cmd_drr_render(args: argparse.Namespace, cfg: RunConfig) -> None:
    ids = fileio.list_cases(cfg.data_dir)
    if not ids:
        raise DataError(f"no phantom cases under {cfg.data_dir}; run 'phantom gen' first")
    pipeline.render_stage(cfg, pipeline.load_cases(cfg, ids))


def cmd_seg_train(args: argparse.Namespace, cfg: RunConfig) -> None:
    pipeline.seg_stage(cfg, pipeline.load_split(cfg, "train"), pipeline.load_split(cfg, "test"))


def cmd_recon_train(args: argparse.Namespace, cfg: RunConfig) -> None:
    lam = _lambda_from_args(args, cfg)
    seg = pipeline.load_seg(cfg) if lam > 0 else None
    pipeline.train_stage(cfg, args.views, lam, pipeline.load_split(cfg, "train"), pipeline.load_split(cfg, "val"),
                         seg, resume=args.resume)


def cmd_recon_infer(args: argparse.Namespace, cfg: RunConfig) -> None:
    if args.angles is not None:
        angles = parse_float_list(args.angles, "--angles")
    else:
        angles = default_view_subset(args.views)
    if args.model:
        checkpoint = Path(args.model)
    else:
        checkpoint = pipeline.RunPaths.of(cfg).model_dir(len(angles), _lambda_from_args(args, cfg)) / BEST_FILE
    model = ReconModel.load(checkpoint)
    ids = [int(i) for i in parse_float_list(args.cases, "--cases")] if args.cases else cfg.split()["test"]
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "infer"

    for case_id in ids:
        recon = pipeline.reconstruct_case(cfg, model, case_id, angles)
        fileio.write_volume(out / f"{case_name(case_id)}.hu.rvol", recon)
        fileio.write_pgm(out / f"{case_name(case_id)}.center.pgm", fileio.center_slice(recon))
    logger.info("Reconstructed %d cases from %d views into %s", len(ids), len(angles), out)


def cmd_eval_metrics(args: argparse.Namespace, cfg: RunConfig) -> None:
    if args.recon is None:
        seg = pipeline.load_seg(cfg)
        metrics, dose, _ = pipeline.evaluate_all(cfg, pipeline.load_split(cfg, "test"), seg)
        pipeline.write_reports(cfg, metrics, dose)
        return
    if args.truth is None:
        raise UsageError("--recon needs --truth")
    if args.labels is not None and args.seg is None:
        raise UsageError("--labels needs --seg to score Dice")
    truth = _truth_from_args(args)
    seg = SegModel.load(args.seg) if args.seg else None
    with_dice = seg is not None and args.labels is not None
    row = {"case": truth.case_id, **evaluate_case(fileio.read_volume(args.recon), truth, seg, with_dice)}
    fileio.write_csv(_output(args, cfg, "metrics.csv"), pd.DataFrame([row]))


def cmd_eval_dose(args: argparse.Namespace, cfg: RunConfig) -> None:
    if args.recon is None:
        seg = pipeline.load_seg(cfg)
        metrics, dose, _ = pipeline.evaluate_all(cfg, pipeline.load_split(cfg, "test"), seg)
        pipeline.write_reports(cfg, metrics, dose)
        return
    if args.truth is None or args.labels is None:
        raise UsageError("dose comparison needs --truth and --labels (the isocenter is placed on the spine)")
    truth = _truth_from_args(args)
    report = compare_dose(truth, fileio.read_volume(args.recon), PlanSpec(mu_mv=cfg.mu_mv))
    fileio.write_csv(_output(args, cfg, "dose.csv"), pd.DataFrame(dose_rows([(truth.case_id, report)])))


def cmd_eval_report(args: argparse.Namespace, cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    pipeline.write_reports(cfg.with_overrides({"figures": "true"}), fileio.read_csv(out / "metrics.csv"),
                           fileio.read_csv(out / "dose.csv"))


def cmd_pipeline_run(args: argparse.Namespace, cfg: RunConfig) -> None:
    summary = pipeline.run(cfg)
    logger.info("Summary:\n%s", summary.to_string(index=False))


# --- parser ---------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--verbose", "-v", action="store_true", help="log per-step details")
    return common


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--views", type=int, default=2, help="view count 1 to 4 (default 2)")
    parser.add_argument("--lambda", dest="lam", type=float, help="Dice weight (default: first configured lambda)")


def _add_pair_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--recon", help="reconstructed HU .rvol (omit to evaluate the test split)")
    parser.add_argument("--truth", help="ground-truth HU .rvol")
    parser.add_argument("--labels", help="ground-truth labels .rvol")
    parser.add_argument("--case", type=int, default=0, help="case id written to the CSV row")
    parser.add_argument("--out", help="output CSV")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="s2ct", description="Sparse-view CT reconstruction toolkit")
    groups = parser.add_subparsers(dest="group", metavar="group", required=True)

    def action(group: argparse._SubParsersAction, name: str, handler: Handler, help_text: str) -> argparse.ArgumentParser:
        sub = group.add_parser(name, parents=[common], help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    phantom = groups.add_parser("phantom", help="synthetic phantoms").add_subparsers(dest="action", required=True)
    action(phantom, "gen", cmd_phantom_gen, "generate the dataset")

    drr = groups.add_parser("drr", help="radiograph rendering").add_subparsers(dest="action", required=True)
    action(drr, "render", cmd_drr_render, "render views of every phantom")

    seg = groups.add_parser("seg", help="segmentation network").add_subparsers(dest="action", required=True)
    action(seg, "train", cmd_seg_train, "pretrain and freeze the segmenter")

    recon = groups.add_parser("recon", help="reconstruction model").add_subparsers(dest="action", required=True)
    train = action(recon, "train", cmd_recon_train, "train one model")
    _add_model_args(train)
    train.add_argument("--resume", action="store_true", help="continue from train_state.rckp")
    infer = action(recon, "infer", cmd_recon_infer, "reconstruct from stored views")
    _add_model_args(infer)
    infer.add_argument("--angles", help="comma separated view angles (overrides --views)")
    infer.add_argument("--model", help="checkpoint (default: model_best.rckp of --views/--lambda)")
    infer.add_argument("--cases", help="comma separated case ids (default: test split)")
    infer.add_argument("--out", help="output directory (default: <out_dir>/infer)")

    ev = groups.add_parser("eval", help="evaluation").add_subparsers(dest="action", required=True)
    metrics = action(ev, "metrics", cmd_eval_metrics, "PSNR, SSIM and structure Dice")
    _add_pair_args(metrics)
    metrics.add_argument("--seg", help="segmentation checkpoint for Dice in pair mode")
    _add_pair_args(action(ev, "dose", cmd_eval_dose, "isocenter dose error"))
    action(ev, "report", cmd_eval_report, "rebuild summary.csv and report.html")

    run = groups.add_parser("pipeline", help="end-to-end run").add_subparsers(dest="action", required=True)
    action(run, "run", cmd_pipeline_run, "run every stage")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        cfg = load_config(args.config, _parse_overrides(args.overrides))
        args.handler(args, cfg)
    except S2CTError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Pipeline stages shared by the command line.

Stages run in order: generate phantoms, render views, pretrain the
segmenter, train one reconstruction model per (view count, lambda), then
reconstruct and evaluate the test cases. Each stage reads what the previous
one wrote, so any stage can be rerun on its own.

Output layout under ``out_dir``::

    run.cfg                      effective configuration
    seg/model.seg.rckp           frozen segmenter (+ .json settings)
    seg/seg_dice.csv             held-out per-class Dice
    v<k>_lam<l>/                 checkpoints and train_log.csv per model
    recon/v<k>_lam<l>/           case_####.hu.rvol and center-slice PGMs
    figures/                     montages and view strips
    metrics.csv, dose.csv, summary.csv, report.html
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

import fileio
from config import RunConfig
from dose import PlanSpec, compare_dose, dose_rows
from drr import DRRImage, hu_to_mu, read_views, render_views, write_views
from geometry import default_view_subset
from metrics import dice_columns, evaluate_case, summarize
from phantom import PhantomSpec, generate_dataset
from recon_model import ReconModel, ReconSettings
from segmentation import SEG_SUFFIX, SegModel, SegSettings, pretrain_seg
from trainer import BEST_FILE, LOG_FILE, TrainConfig, Trainer, TrainingCase
from utils import DataError, case_name, format_float_list, parallel_map
from visualization import save_center_slice_montage, save_view_strip, write_html_report
from volume import LabeledVolume, Volume

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["case", "views", "lambda", "psnr", "ssim"] + dice_columns()
DOSE_COLUMNS = ["case", "views", "lambda", "dose_truth", "dose_recon", "percent_error"]


@dataclass
class RunPaths:
    data: Path
    out: Path

    @classmethod
    def of(cls, cfg: RunConfig) -> "RunPaths":
        return cls(Path(cfg.data_dir), Path(cfg.out_dir))

    @property
    def seg_checkpoint(self) -> Path:
        return self.out / "seg" / f"model{SEG_SUFFIX}"

    def model_dir(self, views: int, lam: float) -> Path:
        return self.out / run_tag(views, lam)

    def recon_dir(self, views: int, lam: float) -> Path:
        return self.out / "recon" / run_tag(views, lam)


def run_tag(views: int, lam: float) -> str:
    return f"v{views}_lam{lam:g}"


def phantom_spec(cfg: RunConfig) -> PhantomSpec:
    return PhantomSpec(seed=cfg.seed, dim=cfg.dim, spacing=cfg.spacing)


# --- stages -------------------------------------------------------------

def generate_stage(cfg: RunConfig) -> List[LabeledVolume]:
    split = cfg.split()
    n = sum(len(ids) for ids in split.values())
    started = time.perf_counter()
    cases = generate_dataset(n, cfg.seed, phantom_spec(cfg), RunPaths.of(cfg).data)
    logger.info("Generated %d phantoms in %.1f s", n, time.perf_counter() - started)
    return cases


def load_cases(cfg: RunConfig, ids: Sequence[int]) -> List[LabeledVolume]:
    root = RunPaths.of(cfg).data
    return parallel_map(lambda i: fileio.read_case(root, i), ids)


def load_split(cfg: RunConfig, name: str) -> List[LabeledVolume]:
    """Cases of the ``train``, ``val`` or ``test`` split, read from ``data_dir``."""
    return load_cases(cfg, cfg.split()[name])


def render_stage(cfg: RunConfig, cases: Sequence[LabeledVolume]) -> Dict[int, List[DRRImage]]:
    """Render every configured angle of every case and write the ``.rimg`` files."""
    root = RunPaths.of(cfg).data
    template = cfg.geometry()

    def render(case: LabeledVolume) -> Tuple[int, List[DRRImage]]:
        images = render_views(hu_to_mu(case.hu, cfg.mu_water), cfg.views, template, cfg.step_vox, workers=1)
        write_views(root, case.case_id, images)
        return case.case_id, images

    started = time.perf_counter()
    rendered = dict(parallel_map(render, cases))
    logger.info("Rendered %d views for %d cases in %.1f s", len(cfg.views), len(cases),
                time.perf_counter() - started)
    return rendered


def load_views(cfg: RunConfig, case_id: int, angles: Sequence[float]) -> List[DRRImage]:
    return read_views(RunPaths.of(cfg).data, case_id, angles, cfg.geometry())


def seg_stage(cfg: RunConfig, train: Sequence[LabeledVolume], held_out: Sequence[LabeledVolume]) -> SegModel:
    paths = RunPaths.of(cfg)
    model, _, report = pretrain_seg(train, cfg.seg_epochs, cfg.seg_lr, cfg.seed, held_out, SegSettings(seed=cfg.seed))
    model.save(paths.seg_checkpoint)
    fileio.write_csv(paths.seg_checkpoint.parent / "seg_dice.csv", report)
    return model


def load_seg(cfg: RunConfig) -> SegModel:
    return SegModel.load(RunPaths.of(cfg).seg_checkpoint)


def recon_settings(cfg: RunConfig) -> ReconSettings:
    return ReconSettings(detector_px=cfg.detector_px, features=cfg.features, frequencies=cfg.frequencies,
                         fourier_sigma=cfg.fourier_sigma, width=cfg.width, seed=cfg.seed)


def train_config(cfg: RunConfig, views: int, lam: float) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, lr=cfg.lr, lr_after=cfg.lr_after, drop_epoch=cfg.drop_epoch,
                       points_per_step=cfg.points_per_step, lam=lam, views=default_view_subset(views),
                       seed=cfg.seed, dice_every=cfg.dice_every, chunk=cfg.chunk)


def training_cases(cfg: RunConfig, cases: Sequence[LabeledVolume], angles: Sequence[float]) -> List[TrainingCase]:
    return [TrainingCase.from_case(case, load_views(cfg, case.case_id, angles)) for case in cases]


def train_stage(
    cfg: RunConfig,
    views: int,
    lam: float,
    train: Sequence[LabeledVolume],
    val: Sequence[LabeledVolume],
    seg: Optional[SegModel] = None,
    resume: bool = False,
) -> pd.DataFrame:
    tcfg = train_config(cfg, views, lam)
    out = RunPaths.of(cfg).model_dir(views, lam)
    logger.info("Training %s on %d cases (angles %s)", run_tag(views, lam), len(train), format_float_list(tcfg.views))
    trainer = Trainer(ReconModel(recon_settings(cfg)), tcfg, seg if lam > 0 else None)
    return trainer.fit(training_cases(cfg, train, tcfg.views), training_cases(cfg, val, tcfg.views), out, resume)


def reconstruct_case(
    cfg: RunConfig,
    model: ReconModel,
    case_id: int,
    angles: Sequence[float],
    workers: Optional[int] = None,
) -> Volume:
    images = load_views(cfg, case_id, angles)
    views = [(im.normalized, im.geometry) for im in images]
    return model.reconstruct_volume(views, cfg.dim, cfg.spacing, cfg.chunk, workers=workers)


def evaluate_stage(
    cfg: RunConfig,
    views: int,
    lam: float,
    test: Sequence[LabeledVolume],
    seg: SegModel,
) -> Tuple[List[Dict], List[Dict], Dict[int, Volume]]:
    """Reconstruct the test cases with the best checkpoint and score them."""
    paths = RunPaths.of(cfg)
    model = ReconModel.load(paths.model_dir(views, lam) / BEST_FILE)
    angles = default_view_subset(views)
    recon_dir = paths.recon_dir(views, lam)
    plan = PlanSpec(mu_mv=cfg.mu_mv)

    def run(case: LabeledVolume) -> Tuple[Dict, Dict, Volume]:
        recon = reconstruct_case(cfg, model, case.case_id, angles, workers=1)
        fileio.write_volume(recon_dir / f"{case_name(case.case_id)}.hu.rvol", recon)
        fileio.write_pgm(recon_dir / f"{case_name(case.case_id)}.center.pgm", fileio.center_slice(recon))
        tags = {"case": case.case_id, "views": views, "lambda": lam}
        scores = {**tags, **evaluate_case(recon, case, seg)}
        (dose,) = dose_rows([(case.case_id, compare_dose(case, recon, plan))])
        return scores, {**dose, **tags}, recon

    results = parallel_map(run, test)
    return [r[0] for r in results], [r[1] for r in results], {c.case_id: r[2] for c, r in zip(test, results)}


def evaluate_all(
    cfg: RunConfig,
    test: Sequence[LabeledVolume],
    seg: SegModel,
) -> Tuple[pd.DataFrame, pd.DataFrame, Dict[str, Dict[int, Volume]]]:
    """Evaluate every trained (view count, lambda) model on the test split."""
    metric_rows: List[Dict] = []
    dose_table: List[Dict] = []
    recons: Dict[str, Dict[int, Volume]] = {}
    for k in cfg.eval_views:
        for lam in cfg.lambdas:
            scores, doses, volumes = evaluate_stage(cfg, k, lam, test, seg)
            metric_rows += scores
            dose_table += doses
            recons[run_tag(k, lam)] = volumes
    return (pd.DataFrame(metric_rows, columns=METRICS_COLUMNS), pd.DataFrame(dose_table, columns=DOSE_COLUMNS),
            recons)


def write_reports(cfg: RunConfig, metrics: pd.DataFrame, dose: pd.DataFrame) -> pd.DataFrame:
    out = RunPaths.of(cfg).out
    fileio.write_csv(out / "metrics.csv", metrics)
    fileio.write_csv(out / "dose.csv", dose)
    merged = metrics.merge(dose[["case", "views", "lambda", "percent_error"]], on=["case", "views", "lambda"], how="outer")
    summary = summarize(merged)
    fileio.write_csv(out / "summary.csv", summary)
    if cfg.figures:
        write_report(cfg, metrics, dose, summary)
    return summary


def write_report(cfg: RunConfig, metrics: pd.DataFrame, dose: pd.DataFrame, summary: pd.DataFrame) -> None:
    paths = RunPaths.of(cfg)
    logs = {}
    for k in cfg.eval_views:
        for lam in cfg.lambdas:
            log_path = paths.model_dir(k, lam) / LOG_FILE
            if log_path.exists():
                logs[run_tag(k, lam)] = fileio.read_csv(log_path)
    write_html_report(paths.out / "report.html", metrics, dose, summary, logs)


def run(cfg: RunConfig) -> pd.DataFrame:
    """
    Execute every stage and return the summary table.

    Raises:
        S2CTError: Any stage failure, with the exit code of its category
    """
    paths = RunPaths.of(cfg)
    started = time.perf_counter()
    try:
        paths.out.mkdir(parents=True, exist_ok=True)
        (paths.out / "run.cfg").write_text(cfg.to_text(), encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write to {paths.out}: {exc}")

    cases = generate_stage(cfg)
    by_id = {c.case_id: c for c in cases}
    split = cfg.split()
    train, val, test = ([by_id[i] for i in split[name]] for name in ("train", "val", "test"))
    rendered = render_stage(cfg, cases)
    seg = seg_stage(cfg, train, test)

    for k in cfg.eval_views:
        for lam in cfg.lambdas:
            train_stage(cfg, k, lam, train, val, seg)
    metrics, dose, recons = evaluate_all(cfg, test, seg)

    if cfg.figures:
        first = test[0]
        save_center_slice_montage(paths.out / "figures" / f"{case_name(first.case_id)}_montage.png", first,
                                  {tag: vols[first.case_id] for tag, vols in recons.items()})
        save_view_strip(paths.out / "figures" / f"{case_name(first.case_id)}_views.png", rendered[first.case_id])

    summary = write_reports(cfg, metrics, dose)
    logger.info("Pipeline finished in %.1f min", (time.perf_counter() - started) / 60.0)
    return summary

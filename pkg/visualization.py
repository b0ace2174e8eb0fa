"""
Figures and the HTML run report.

PNG figures use matplotlib's Agg backend; the report is one self-contained
HTML file built from plotly figures and the run's CSV tables.
"""

import html
import logging
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import plotly.express as px  # noqa: E402
import plotly.graph_objects as go  # noqa: E402

from drr import DRRImage  # noqa: E402
from fileio import center_slice  # noqa: E402
from geometry import angle_name  # noqa: E402
from utils import DataError  # noqa: E402
from volume import HU_MAX, HU_MIN, LabeledVolume, Volume  # noqa: E402

logger = logging.getLogger(__name__)

CONTOURS = {2: ("lung_left", "tab:cyan"), 4: ("heart", "tab:red")}


def _save(fig: plt.Figure, path: Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120, bbox_inches="tight")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}")
    finally:
        plt.close(fig)
    logger.info("Wrote figure %s", path)


def save_center_slice_montage(path: Path, truth: LabeledVolume, recons: Mapping[str, Volume]) -> None:
    """
    Truth and reconstructions side by side at the center axial slice.

    Left-lung and heart outlines from the truth labels are drawn on every panel.
    """
    panels = [("truth", truth.hu)] + list(recons.items())
    labels = center_slice(truth.labels)
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.8), squeeze=False)
    for ax, (title, vol) in zip(axes[0], panels):
        ax.imshow(center_slice(vol), cmap="gray", vmin=HU_MIN, vmax=HU_MAX)
        for label, (_, color) in CONTOURS.items():
            mask = (labels == label).astype(float)
            if mask.any():
                ax.contour(mask, levels=[0.5], colors=color, linewidths=0.8)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.suptitle(f"case {truth.case_id}", fontsize=10)
    _save(fig, path)


def save_view_strip(path: Path, images: Sequence[DRRImage]) -> None:
    fig, axes = plt.subplots(1, len(images), figsize=(2.4 * len(images), 2.6), squeeze=False)
    for ax, image in zip(axes[0], images):
        ax.imshow(image.normalized, cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(angle_name(image.geometry.theta_deg), fontsize=9)
        ax.axis("off")
    _save(fig, path)


def _training_curves(logs: Mapping[str, pd.DataFrame]) -> Optional[go.Figure]:
    frames = [log.assign(run=name) for name, log in logs.items() if len(log)]
    if not frames:
        return None
    data = pd.concat(frames, ignore_index=True)
    return px.line(data, x="epoch", y="val_psnr", color="run", markers=True,
                   title="Validation PSNR per epoch", labels={"val_psnr": "PSNR (dB)"})


def _box(frame: pd.DataFrame, column: str, title: str) -> Optional[go.Figure]:
    if column not in frame.columns or frame[column].dropna().empty:
        return None
    data = frame.assign(lam=frame["lambda"].astype(str)) if "lambda" in frame.columns else frame
    return px.box(data, x="views", y=column, color="lam" if "lam" in data.columns else None,
                  points="all", title=title, labels={"lam": "lambda"})


def _table(frame: pd.DataFrame, title: str) -> go.Figure:
    cells = [frame[c].map(lambda v: f"{v:.4g}" if isinstance(v, float) else v).tolist() for c in frame.columns]
    fig = go.Figure(go.Table(header=dict(values=list(frame.columns)), cells=dict(values=cells)))
    fig.update_layout(title=title)
    return fig


def write_html_report(
    path: Path,
    metrics: Optional[pd.DataFrame] = None,
    dose: Optional[pd.DataFrame] = None,
    summary: Optional[pd.DataFrame] = None,
    train_logs: Optional[Dict[str, pd.DataFrame]] = None,
    title: str = "Sparse-view reconstruction report",
) -> None:
    """
    Write a self-contained HTML report.

    Sections without data are skipped; plotly.js is embedded once.
    """
    figures = []
    if train_logs:
        figures.append(_training_curves(train_logs))
    if metrics is not None and len(metrics):
        figures.append(_box(metrics, "psnr", "PSNR by view count"))
        figures.append(_box(metrics, "ssim", "SSIM by view count"))
        figures.append(_box(metrics, "dice_mean", "Mean structure Dice by view count"))
    if dose is not None and len(dose):
        figures.append(_box(dose, "percent_error", "Isocenter dose error (%) by view count"))
    if summary is not None and len(summary):
        figures.append(_table(summary, "Summary (mean, sd, 95% CI half-width)"))

    parts = [f"<html><head><meta charset='utf-8'><title>{html.escape(title)}</title></head><body>",
             f"<h1>{html.escape(title)}</h1>"]
    embedded = False
    for fig in (f for f in figures if f is not None):
        parts.append(fig.to_html(full_html=False, include_plotlyjs=not embedded))
        embedded = True
    if not embedded:
        parts.append("<p>No results yet.</p>")
    parts.append("</body></html>")

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(parts), encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}")
    logger.info("Wrote report %s", path)

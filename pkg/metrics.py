"""
Voxel-level (PSNR, SSIM) and structure-level (hard Dice) evaluation.

PSNR and SSIM work on normalized [0, 1] intensities with data range 1.
SSIM is the 2D definition evaluated on every axial slice and averaged.
"""

import logging
from typing import Dict, Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

from utils import UsageError
from volume import CLASS_NAMES, FOREGROUND_CLASSES, LabeledVolume, Volume, hu_to_normalized

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
MSE_FLOOR = 1e-10
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5: an 11x11 window at sigma 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CI_Z = 1.96

ArrayOrVolume = Union[np.ndarray, Volume]

SUMMARY_METRICS = ("psnr", "ssim", "dice_mean", "percent_error")


def _array(value: ArrayOrVolume) -> np.ndarray:
    return value.data if isinstance(value, Volume) else np.asarray(value)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise UsageError(f"{what} needs equal shapes, got {a.shape} and {b.shape}")


def psnr(a: ArrayOrVolume, b: ArrayOrVolume) -> float:
    """-10 log10(MSE) for data range 1, capped at 100 dB."""
    x, y = _array(a).astype(np.float64), _array(b).astype(np.float64)
    _same_shape(x, y, "psnr")
    mse = float(np.mean((x - y) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * np.log10(mse))


def ssim(a: ArrayOrVolume, b: ArrayOrVolume) -> float:
    """
    Mean structural similarity over axial slices.

    Local statistics use a Gaussian window (sigma 1.5, 11 taps) applied
    within each slice only.
    """
    x, y = _array(a).astype(np.float64), _array(b).astype(np.float64)
    _same_shape(x, y, "ssim")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    sigma = (SSIM_SIGMA, SSIM_SIGMA, 0.0)

    def blur(v: np.ndarray) -> np.ndarray:
        return gaussian_filter(v, sigma=sigma, truncate=SSIM_TRUNCATE, mode="reflect")

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    per_slice = (numerator / denominator).mean(axis=(0, 1))
    return float(per_slice.mean())


def hard_dice(pred_labels: ArrayOrVolume, ref_labels: ArrayOrVolume, k: int) -> float:
    """2|A n B| / (|A| + |B|) for class ``k``; 1.0 when both are empty."""
    pred, ref = _array(pred_labels), _array(ref_labels)
    _same_shape(pred, ref, "hard_dice")
    a, b = pred == k, ref == k
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


def evaluate_case(recon: Volume, truth: LabeledVolume, seg=None, with_dice: bool = True) -> Dict[str, float]:
    """
    Score one HU reconstruction against its phantom.

    Recon labels come from the segmentation network's argmax; truth labels
    are the phantom's own.

    Args:
        recon: Reconstructed HU volume
        truth: Ground-truth phantom
        seg: Segmentation model exposing ``segment(hu) -> Volume``
        with_dice: Compute structure-level Dice (requires ``seg``)

    Returns:
        ``psnr``, ``ssim``, ``dice_mean`` and one ``dice_<class>`` per foreground class (NaN when absent)
    """
    _same_shape(recon.data, truth.hu.data, "evaluate_case")
    recon_n = hu_to_normalized(recon.data)
    truth_n = hu_to_normalized(truth.hu.data)
    row = {"psnr": psnr(recon_n, truth_n), "ssim": ssim(recon_n, truth_n)}
    if not with_dice:
        return row
    if seg is None:
        raise UsageError("structure Dice requested but no segmentation checkpoint was given")

    pred = seg.segment(recon).data
    ref = truth.labels.data
    present = []
    for k in FOREGROUND_CLASSES:
        name = f"dice_{CLASS_NAMES[k]}"
        if np.any(ref == k):
            row[name] = hard_dice(pred, ref, k)
            present.append(row[name])
        else:
            row[name] = float("nan")
    row["dice_mean"] = float(np.mean(present)) if present else float("nan")
    return row


def dice_columns() -> list:
    return ["dice_mean"] + [f"dice_{CLASS_NAMES[k]}" for k in FOREGROUND_CLASSES]


def summarize(frame: pd.DataFrame, by: Sequence[str] = ("views", "lambda"),
              metrics: Iterable[str] = SUMMARY_METRICS) -> pd.DataFrame:
    """
    Mean, sample sd and 95% CI half-width (1.96 sd / sqrt(n)) per group.

    Only metrics present in ``frame`` are summarized. ``percent_error`` also
    gets a ``percent_error_text`` column formatted as ``"mean (sd)"``.
    """
    keys = [k for k in by if k in frame.columns]
    present = [m for m in metrics if m in frame.columns]
    if not present:
        raise UsageError(f"none of {', '.join(metrics)} found in columns {list(frame.columns)}")
    grouped = frame.groupby(keys, sort=True) if keys else frame.assign(_all=0).groupby("_all")
    rows = []
    for key, group in grouped:
        key = key if isinstance(key, tuple) else (key,)
        row = dict(zip(keys, key)) if keys else {}
        row["n"] = len(group)
        for m in present:
            values = group[m].dropna().astype(float)
            mean = float(values.mean()) if len(values) else float("nan")
            sd = float(values.std(ddof=1)) if len(values) > 1 else float("nan")
            row[f"{m}_mean"] = mean
            row[f"{m}_sd"] = sd
            row[f"{m}_ci95"] = CI_Z * sd / np.sqrt(len(values)) if len(values) > 1 else float("nan")
            if m == "percent_error":
                row["percent_error_text"] = f"{mean:.2f} ({sd:.2f})"
        rows.append(row)
    return pd.DataFrame(rows)

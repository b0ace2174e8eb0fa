"""
Isocenter dose surrogate for a 2-field opposed plan.

Each beam contributes ``prescription / n_beams * exp(-mu_mv * RPL)`` where
RPL is the water-equivalent path from the volume boundary to the isocenter
along the beam's central axis. A vacuum path therefore delivers exactly the
prescription.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from geometry import ray_direction
from utils import DataError, UsageError
from volume import HU_MAX, HU_MIN, LabeledVolume, Volume

logger = logging.getLogger(__name__)

SPINE_LABEL = 5

Index3 = Tuple[int, int, int]


@dataclass(frozen=True)
class PlanSpec:
    """
    Opposed-beam plan; beam angles are gantry angles about z in degrees.

    Central axes must run along a volume axis, so angles are multiples of 90.
    """

    beam_angles: Tuple[float, float] = (90.0, 270.0)
    prescription: float = 200.0
    mu_mv: float = 0.0025
    isocenter: Optional[Index3] = None

    def __post_init__(self):
        if len(self.beam_angles) != 2:
            raise UsageError(f"plan needs exactly two beams, got {len(self.beam_angles)}")
        a, b = (float(t) % 360.0 for t in self.beam_angles)
        if abs(((a - b) % 360.0) - 180.0) > 1e-9:
            raise UsageError(f"plan beams must be 180 degrees apart, got {a:g} and {b:g}")
        if any(t % 90.0 for t in (a, b)):
            raise UsageError(f"central-axis beams must be multiples of 90 degrees, got {a:g} and {b:g}")
        if self.mu_mv < 0 or self.prescription <= 0:
            raise UsageError("plan needs mu_mv >= 0 and a positive prescription")

    def with_isocenter(self, isocenter: Index3) -> "PlanSpec":
        return PlanSpec(self.beam_angles, self.prescription, self.mu_mv, tuple(int(i) for i in isocenter))


@dataclass(frozen=True)
class DoseReport:
    dose_truth: float
    dose_recon: float
    isocenter: Index3

    @property
    def percent_error(self) -> float:
        return 100.0 * abs(self.dose_recon - self.dose_truth) / self.dose_truth


def place_isocenter(labels: Volume) -> Index3:
    """
    Spine centroid rounded to the nearest voxel.

    When the rounded centroid is not itself spine, the spine voxel nearest to
    the centroid is used (first in C order on ties).

    Raises:
        DataError: No spine voxels
    """
    spine = np.argwhere(labels.data == SPINE_LABEL)
    if len(spine) == 0:
        raise DataError("cannot place isocenter: volume has no spine voxels")
    centroid = spine.mean(axis=0)
    rounded = tuple(int(i) for i in np.round(centroid))
    if all(0 <= i < n for i, n in zip(rounded, labels.shape)) and labels.data[rounded] == SPINE_LABEL:
        return rounded
    nearest = spine[np.argmin(((spine - centroid) ** 2).sum(axis=1))]
    return tuple(int(i) for i in nearest)


def _beam_axis(theta_deg: float) -> Tuple[int, int]:
    """Volume axis and travel sign of a central axis at ``theta_deg``."""
    d = np.round(ray_direction(theta_deg)).astype(int)
    axis = int(np.flatnonzero(d)[0])
    return axis, int(d[axis])


def radiological_path(hu: Volume, isocenter: Index3, theta_deg: float) -> float:
    """
    Water-equivalent length in mm from the entry face to the isocenter center.

    Weights ``max(0, 1 + hu/1000)`` are linearly interpolated between voxel
    centers; the half voxel next to the entry face uses the edge weight.
    """
    axis, sign = _beam_axis(theta_deg)
    weights = np.maximum(0.0, 1.0 + np.clip(hu.data.astype(np.float64), HU_MIN, HU_MAX) / 1000.0)
    index = list(isocenter)
    index[axis] = slice(None)
    column = weights[tuple(index)]
    i = isocenter[axis]
    # beam travelling +axis enters at index 0, -axis at the last index
    path = column[: i + 1] if sign > 0 else column[i:][::-1]
    trapezoids = 0.5 * (path[:-1] + path[1:]).sum()
    return hu.spacing[axis] * (0.5 * path[0] + trapezoids)


def isocenter_dose(vol_hu: Volume, plan: PlanSpec, isocenter: Optional[Index3] = None) -> float:
    """
    Central-axis dose at the isocenter in cGy.

    Args:
        vol_hu: HU volume
        plan: Beam arrangement, prescription and attenuation
        isocenter: Voxel index (defaults to ``plan.isocenter``)

    Raises:
        UsageError: Isocenter missing or outside the volume
    """
    iso = isocenter if isocenter is not None else plan.isocenter
    if iso is None:
        raise UsageError("isocenter_dose needs an isocenter")
    if len(iso) != 3 or not all(0 <= int(i) < n for i, n in zip(iso, vol_hu.shape)):
        raise UsageError(f"isocenter {tuple(iso)} outside volume {vol_hu.shape}")
    iso = tuple(int(i) for i in iso)
    per_beam = plan.prescription / len(plan.beam_angles)
    return float(sum(per_beam * np.exp(-plan.mu_mv * radiological_path(vol_hu, iso, t)) for t in plan.beam_angles))


def compare_dose(truth: LabeledVolume, recon: Volume, plan: PlanSpec = PlanSpec()) -> DoseReport:
    """Dose at the truth-placed isocenter on both volumes."""
    if truth.hu.shape != recon.shape:
        raise UsageError(f"truth {truth.hu.shape} and recon {recon.shape} differ in shape")
    iso = plan.isocenter if plan.isocenter is not None else place_isocenter(truth.labels)
    report = DoseReport(isocenter_dose(truth.hu, plan, iso), isocenter_dose(recon, plan, iso), tuple(iso))
    logger.debug("case %d: isocenter %s, dose %.3f vs %.3f cGy", truth.case_id, iso, report.dose_truth,
                 report.dose_recon)
    return report


def dose_rows(reports: Sequence[Tuple[int, DoseReport]]) -> list:
    return [
        {"case": case_id, "dose_truth": r.dose_truth, "dose_recon": r.dose_recon, "percent_error": r.percent_error}
        for case_id, r in reports
    ]

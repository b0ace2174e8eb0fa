"""
Digitally reconstructed radiographs.

Rays are clipped to the volume box (the voxel grid plus half a voxel on
every side) and sampled at segment midpoints with trilinear interpolation;
the sum of ``mu * step`` in mm is the line integral of the ray.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

import fileio
from geometry import Beam, ViewGeometry, detector_axes, pixel_to_detector, ray_direction
from utils import DataError, UsageError, parallel_map
from volume import HU_MAX, HU_MIN, Volume, VolumeKind

logger = logging.getLogger(__name__)

MU_WATER = 0.0227
DEFAULT_STEP_VOX = 0.25
ROWS_PER_TASK = 8


@dataclass
class DRRImage:
    """One rendered view; all three images are ``[d, d]`` with row 0 at the top."""

    line_integral: np.ndarray
    geometry: ViewGeometry

    @property
    def intensity(self) -> np.ndarray:
        return np.exp(-self.line_integral).astype(np.float32)

    @property
    def normalized(self) -> np.ndarray:
        peak = float(self.line_integral.max()) if self.line_integral.size else 0.0
        if peak <= 0.0:
            return np.zeros_like(self.line_integral, dtype=np.float32)
        return (self.line_integral / peak).astype(np.float32)

    def to_channels(self) -> np.ndarray:
        """``[2, d, d]``: normalized network input, then the line integral."""
        return np.stack([self.normalized, self.line_integral]).astype(np.float32)

    @classmethod
    def from_channels(cls, channels: np.ndarray, geometry: ViewGeometry) -> "DRRImage":
        if channels.shape[0] < 2:
            raise DataError(f"view file needs 2 channels (normalized, line integral), got {channels.shape[0]}")
        return cls(np.asarray(channels[1], dtype=np.float32), geometry)


def hu_to_mu(hu: Volume, mu_water: float = MU_WATER) -> Volume:
    """mu = mu_water * (1 + hu / 1000), clamped at 0."""
    data = np.clip(hu.data.astype(np.float64), HU_MIN, HU_MAX)
    mu = np.maximum(mu_water * (1.0 + data / 1000.0), 0.0)
    return Volume(mu, hu.spacing, VolumeKind.MU)


def _rays(g: ViewGeometry, rows: np.ndarray, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Ray origins and directions, in normalized coordinates, for the given pixels."""
    uv = pixel_to_detector(np.stack([rows, cols], axis=-1), g.detector_px)
    d = ray_direction(g.theta_deg)
    u_axis, v_axis = detector_axes(g.theta_deg)
    on_axes = uv[:, :1] * u_axis + uv[:, 1:] * v_axis
    if g.beam is Beam.PARALLEL:
        return on_axes, np.broadcast_to(d, on_axes.shape)
    rs, rd = g.source_dist, g.detector_dist
    # undo the isocenter magnification applied by project()
    targets = rd * d + on_axes * ((rs + rd) / rs)
    source = -rs * d
    return np.broadcast_to(source, targets.shape), targets - source


def _integrate(mu: Volume, g: ViewGeometry, rows: np.ndarray, cols: np.ndarray, step_vox: float) -> np.ndarray:
    dims = np.asarray(mu.shape, dtype=np.float64)
    spacing = np.asarray(mu.spacing, dtype=np.float64)
    to_mm = (dims - 1.0) * spacing / 2.0
    half_box = dims * spacing / 2.0

    origin, direction = _rays(g, rows, cols)
    origin = origin * to_mm
    direction = direction * to_mm
    direction = direction / np.linalg.norm(direction, axis=1, keepdims=True)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t1 = (-half_box - origin) * inv
        t2 = (half_box - origin) * inv
    t_near = np.max(np.fmin(t1, t2), axis=1)
    t_far = np.min(np.fmax(t1, t2), axis=1)
    if g.beam is Beam.CONE:
        t_near = np.maximum(t_near, 0.0)
    length = np.maximum(t_far - t_near, 0.0)
    length[~np.isfinite(length)] = 0.0

    step = step_vox * float(spacing.min())
    counts = np.ceil(length / step).astype(np.int64)
    result = np.zeros(len(rows), dtype=np.float64)
    if counts.max(initial=0) == 0:
        return result

    hit = counts > 0
    seg = np.zeros_like(length)
    seg[hit] = length[hit] / counts[hit]
    k = np.arange(counts.max()) + 0.5
    t = t_near[:, None] + k[None, :] * seg[:, None]
    valid = k[None, :] < counts[:, None]

    points = origin[:, None, :] + t[..., None] * direction[:, None, :]
    index = points / spacing + (dims - 1.0) / 2.0
    samples = map_coordinates(mu.data, index[valid].T, order=1, mode="nearest")
    dense = np.zeros(valid.shape, dtype=np.float64)
    dense[valid] = samples
    result[:] = dense.sum(axis=1) * seg
    return result


def render_drr(
    vol: Volume,
    g: ViewGeometry,
    step_vox: float = DEFAULT_STEP_VOX,
    workers: Optional[int] = None,
) -> DRRImage:
    """
    Render one view of an attenuation volume.

    Args:
        vol: Attenuation volume in mm^-1 (``VolumeKind.MU``)
        g: View geometry
        step_vox: Sampling step as a fraction of the smallest voxel size
        workers: Threads for the row blocks; pass 1 when already inside a pool

    Returns:
        DRRImage whose line integrals are dimensionless (mu in mm^-1 times mm)
    """
    if not 0.0 < step_vox <= 1.0:
        raise UsageError(f"step_vox must be in (0, 1], got {step_vox}")
    if vol.kind != VolumeKind.MU:
        raise UsageError(f"render_drr needs an attenuation volume, got {vol.kind.name}")
    if np.any(vol.data < 0):
        raise UsageError("attenuation volume has negative entries")

    started = time.perf_counter()
    d = g.detector_px
    blocks = [np.arange(start, min(start + ROWS_PER_TASK, d)) for start in range(0, d, ROWS_PER_TASK)]

    def render_rows(block: np.ndarray) -> np.ndarray:
        rr, cc = np.meshgrid(block, np.arange(d), indexing="ij")
        return _integrate(vol, g, rr.ravel().astype(np.float64), cc.ravel().astype(np.float64), step_vox)

    rows = parallel_map(render_rows, blocks, workers)
    image = np.concatenate(rows).reshape(d, d).astype(np.float32)
    logger.debug("Rendered theta=%g (%s) in %.3f s", g.theta_deg, g.beam.value, time.perf_counter() - started)
    return DRRImage(image, g)


def render_views(
    vol: Volume,
    angles: Sequence[float],
    template: ViewGeometry = ViewGeometry(),
    step_vox: float = DEFAULT_STEP_VOX,
    workers: Optional[int] = None,
) -> List[DRRImage]:
    """One DRR per angle, sharing the beam and detector settings of ``template``."""
    if len(angles) == 0:
        raise UsageError("render_views needs at least one angle")
    return [render_drr(vol, template.with_angle(theta), step_vox, workers) for theta in angles]


def write_views(root: Path, case_id: int, images: Sequence[DRRImage]) -> None:
    for image in images:
        fileio.write_image(fileio.view_path(root, case_id, image.geometry.theta_deg), image.to_channels())


def read_views(root: Path, case_id: int, angles: Sequence[float], template: ViewGeometry) -> List[DRRImage]:
    """Stored views of one case; each file must match the detector size of ``template``."""
    d = template.detector_px
    images = []
    for theta in angles:
        path = fileio.view_path(root, case_id, theta)
        channels = fileio.read_image(path)
        if channels.shape[1:] != (d, d):
            raise DataError(f"{path}: view is {channels.shape[1]}x{channels.shape[2]}, configured detector is {d}x{d}")
        try:
            images.append(DRRImage.from_channels(channels, template.with_angle(theta)))
        except DataError as exc:
            raise DataError(f"{path}: {exc}")
    return images

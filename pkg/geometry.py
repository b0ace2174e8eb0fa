"""
Coordinate conventions and the projection operator.

Normalized volume coordinates put voxel centers on [-1, 1] along every axis,
with ``z`` the superior-inferior axis. A view at gantry angle theta looks
along ``d(theta) = (cos, sin, 0)``; its detector axes are
``u(theta) = (-sin, cos, 0)`` and ``v = (0, 0, 1)``. Rotation is about z only.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from utils import NumericError, UsageError

DEFAULT_ANGLES = (0.0, 45.0, 90.0, 135.0)

VIEW_SUBSETS = {
    1: (90.0,),
    2: (0.0, 90.0),
    3: (0.0, 45.0, 90.0),
    4: (0.0, 45.0, 90.0, 135.0),
}


class Beam(str, Enum):
    PARALLEL = "parallel"
    CONE = "cone"

    @classmethod
    def parse(cls, text: str) -> "Beam":
        key = text.strip().lower()
        if key == "fan":
            return cls.CONE
        try:
            return cls(key)
        except ValueError:
            raise UsageError(f"unknown beam {text!r} (expected parallel, cone or fan)")


@dataclass(frozen=True)
class ViewGeometry:
    """
    One X-ray view: beam model, gantry angle and detector size.

    ``source_dist`` and ``detector_dist`` are in normalized units and only
    matter for cone beams.
    """

    beam: Beam = Beam.PARALLEL
    theta_deg: float = 0.0
    detector_px: int = 32
    source_dist: float = 3.0
    detector_dist: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beam", Beam.parse(self.beam) if isinstance(self.beam, str) else self.beam)
        object.__setattr__(self, "theta_deg", float(self.theta_deg) % 360.0)
        if self.detector_px < 2:
            raise UsageError(f"detector needs at least 2 pixels per side, got {self.detector_px}")
        if self.beam is Beam.CONE:
            if not self.source_dist > 1.0:
                raise UsageError(f"cone beam needs source distance > 1, got {self.source_dist}")
            if not self.detector_dist >= 1.0:
                raise UsageError(f"cone beam needs detector distance >= 1, got {self.detector_dist}")

    @property
    def theta_rad(self) -> float:
        return np.deg2rad(self.theta_deg)

    def with_angle(self, theta_deg: float) -> "ViewGeometry":
        return ViewGeometry(self.beam, theta_deg, self.detector_px, self.source_dist, self.detector_dist)

    def to_text(self) -> str:
        return (f"beam={self.beam.value} theta={self.theta_deg:g} rs={self.source_dist:g} "
                f"rd={self.detector_dist:g} px={self.detector_px}")

    @classmethod
    def from_text(cls, text: str) -> "ViewGeometry":
        """Parse ``beam=... theta=... rs=... rd=...`` (whitespace or comma separated; ``px`` optional)."""
        fields: Dict[str, str] = {}
        for token in text.replace(",", " ").split():
            if "=" not in token:
                raise UsageError(f"malformed geometry token {token!r}")
            key, value = token.split("=", 1)
            fields[key.strip().lower()] = value.strip()
        unknown = set(fields) - {"beam", "theta", "rs", "rd", "px"}
        if unknown:
            raise UsageError(f"unknown geometry keys: {', '.join(sorted(unknown))}")
        try:
            return cls(
                beam=Beam.parse(fields.get("beam", "parallel")),
                theta_deg=float(fields.get("theta", 0.0)),
                detector_px=int(fields.get("px", 32)),
                source_dist=float(fields.get("rs", 3.0)),
                detector_dist=float(fields.get("rd", 1.0)),
            )
        except ValueError as exc:
            raise UsageError(f"invalid geometry {text!r}: {exc}")


def ray_direction(theta_deg: float) -> np.ndarray:
    t = np.deg2rad(theta_deg)
    return np.array([np.cos(t), np.sin(t), 0.0])


def detector_axes(theta_deg: float) -> Tuple[np.ndarray, np.ndarray]:
    t = np.deg2rad(theta_deg)
    return np.array([-np.sin(t), np.cos(t), 0.0]), np.array([0.0, 0.0, 1.0])


def project(points: Union[Sequence[float], np.ndarray], g: ViewGeometry) -> np.ndarray:
    """
    Map normalized 3D points to continuous detector coordinates.

    Parallel beams project orthogonally along ``d(theta)``. Cone beams cast
    the ray from the source ``-R_s * d(theta)`` through the point onto the
    plane ``x . d(theta) = R_d`` and rescale by ``R_s / (R_s + R_d)`` so the
    isocenter plane spans [-1, 1].

    Args:
        points: One point ``(x, y, z)`` or an ``[N, 3]`` array
        g: View geometry

    Returns:
        ``(u, v)`` for a single point, ``[N, 2]`` for arrays

    Raises:
        NumericError: A cone ray does not reach the detector (point at or behind the source)
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    d = ray_direction(g.theta_deg)
    u_axis, v_axis = detector_axes(g.theta_deg)

    if g.beam is Beam.PARALLEL:
        uv = np.stack([pts @ u_axis, pts @ v_axis], axis=1)
    else:
        rs, rd = g.source_dist, g.detector_dist
        source = -rs * d
        rays = pts - source
        along = rays @ d
        if np.any(along <= 1e-9):
            bad = pts[np.argmin(along)]
            raise NumericError(f"cone ray through {tuple(bad)} never reaches the detector at theta={g.theta_deg:g}")
        t = (rd + rs) / along
        hits = source + rays * t[:, None]
        scale = rs / (rs + rd)
        uv = np.stack([hits @ u_axis, hits @ v_axis], axis=1) * scale
    return uv[0] if single else uv


def detector_to_pixel(uv: Union[Sequence[float], np.ndarray], d: int) -> np.ndarray:
    """
    Detector coordinates to continuous ``(row, col)`` pixel coordinates.

    ``col = (u + 1) / 2 * (d - 1)``, ``row = (1 - v) / 2 * (d - 1)``; v points
    up, so row 0 is the top edge.
    """
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    return np.stack([(1.0 - v) / 2.0 * (d - 1), (u + 1.0) / 2.0 * (d - 1)], axis=-1)


def pixel_to_detector(rc: Union[Sequence[float], np.ndarray], d: int) -> np.ndarray:
    """Inverse of ``detector_to_pixel``."""
    rc = np.asarray(rc, dtype=np.float64)
    row, col = rc[..., 0], rc[..., 1]
    return np.stack([2.0 * col / (d - 1) - 1.0, 1.0 - 2.0 * row / (d - 1)], axis=-1)


def voxel_to_normalized(index: Sequence[int], dim: int) -> np.ndarray:
    """
    Voxel index ``(i, j, k)`` to the normalized point of its center.

    Raises:
        IndexError: Any index outside ``[0, dim)``
    """
    idx = np.asarray(index)
    if np.any(idx < 0) or np.any(idx >= dim):
        raise IndexError(f"voxel index {tuple(np.atleast_1d(idx))} outside [0, {dim})")
    return 2.0 * idx.astype(np.float64) / (dim - 1) - 1.0


def normalized_to_voxel(point: Union[Sequence[float], np.ndarray], dim: int) -> np.ndarray:
    """Continuous voxel index of a normalized point (inverse of ``voxel_to_normalized``)."""
    return (np.asarray(point, dtype=np.float64) + 1.0) / 2.0 * (dim - 1)


def voxel_grid(dim: int) -> np.ndarray:
    """Normalized centers of every voxel, ``[dim**3, 3]`` in C order of ``(i, j, k)``."""
    axis = np.linspace(-1.0, 1.0, dim)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def default_view_subset(k: int) -> List[float]:
    """Acquisition angles used for ``k`` input views."""
    if k not in VIEW_SUBSETS:
        raise UsageError(f"view count must be between 1 and 4, got {k}")
    return list(VIEW_SUBSETS[k])


def angle_name(theta_deg: float) -> str:
    theta = float(theta_deg) % 360.0
    if theta == 0.0:
        return "Lateral"
    if theta == 90.0:
        return "Frontal"
    return f"{theta:g}°"

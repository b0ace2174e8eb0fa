"""
Deterministic labeled thoracic phantoms.

A phantom is an elliptic body cylinder holding two lungs, a heart, a spine
column and (half of the time) a nodule inside one lung. Structures are
painted into the HU and label volumes in one pass, lowest priority first, so
later structures overwrite earlier ones:
nodule > spine > heart > lungs > body > air.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from utils import UsageError, parallel_map
from volume import HU_MAX, HU_MIN, LabeledVolume, Volume, VolumeKind

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]

HU_VALUES = {
    "body": 40.0,
    "lung": -800.0,
    "heart": 40.0,
    "spine": 700.0,
    "nodule": 30.0,
}

LABELS = {"body": 1, "lung_left": 2, "lung_right": 3, "heart": 4, "spine": 5, "nodule": 6}


@dataclass(frozen=True)
class StructureRange:
    """Nominal center and semi-axis range of one structure, in normalized coordinates."""

    center: Vec3
    semi_min: Vec3
    semi_max: Vec3


def _default_structures() -> Dict[str, StructureRange]:
    # x: patient left is +x; y: posterior is +y; z: superior-inferior
    return {
        "body": StructureRange((0.0, 0.0, 0.0), (0.80, 0.62, 1.0), (0.88, 0.70, 1.0)),
        "lung_left": StructureRange((0.40, -0.02, 0.05), (0.22, 0.28, 0.60), (0.27, 0.34, 0.72)),
        "lung_right": StructureRange((-0.40, -0.02, 0.05), (0.22, 0.28, 0.60), (0.27, 0.34, 0.72)),
        "heart": StructureRange((0.12, -0.22, -0.20), (0.20, 0.18, 0.22), (0.26, 0.22, 0.30)),
        "spine": StructureRange((0.0, 0.42, 0.0), (0.10, 0.10, 1.0), (0.13, 0.13, 1.0)),
        "nodule": StructureRange((0.0, 0.0, 0.0), (0.05, 0.05, 0.05), (0.09, 0.09, 0.09)),
    }


@dataclass(frozen=True)
class PhantomSpec:
    """
    Everything that determines a phantom.

    The same spec always yields a bit-identical phantom.
    """

    seed: int = 0
    dim: int = 32
    spacing: float = 4.0
    jitter: float = 0.04
    nodule_probability: float = 0.5
    smoothing_sigma: float = 0.5
    structures: Dict[str, StructureRange] = field(default_factory=_default_structures)

    def with_seed(self, seed: int) -> "PhantomSpec":
        return replace(self, seed=seed)


def _ellipse_points(center: Vec3, semi: Vec3, count: int = 72) -> np.ndarray:
    t = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
    return np.stack([center[0] + semi[0] * np.cos(t), center[1] + semi[1] * np.sin(t)], axis=1)


def validate_spec(spec: PhantomSpec) -> None:
    """
    Reject specs that could place a structure outside the body envelope.

    Every structure's widest axial cross-section is checked at the four
    extreme center shifts allowed by the jitter, against the smallest body.
    """
    if spec.dim < 16:
        raise UsageError(f"phantom dim must be >= 16, got {spec.dim}")
    if spec.spacing <= 0:
        raise UsageError(f"phantom spacing must be positive, got {spec.spacing}")
    if spec.jitter < 0:
        raise UsageError(f"phantom jitter must be >= 0, got {spec.jitter}")
    missing = set(LABELS) - set(spec.structures)
    if missing:
        raise UsageError(f"phantom spec lacks structures: {', '.join(sorted(missing))}")

    body = spec.structures["body"]
    a, b = body.semi_min[0], body.semi_min[1]
    j = spec.jitter
    for name in ("lung_left", "lung_right", "heart", "spine"):
        s = spec.structures[name]
        for dx in (-j, j):
            for dy in (-j, j):
                pts = _ellipse_points((s.center[0] + dx, s.center[1] + dy, 0.0), s.semi_max)
                if np.any((pts[:, 0] / a) ** 2 + (pts[:, 1] / b) ** 2 >= 1.0):
                    raise UsageError(f"structure {name!r} can extend outside the body envelope")
        if name != "spine" and abs(s.center[2]) + j + s.semi_max[2] > 1.0:
            raise UsageError(f"structure {name!r} can extend beyond the volume along z")

    left, right = spec.structures["lung_left"], spec.structures["lung_right"]
    if left.center[0] - j - left.semi_max[0] <= right.center[0] + j + right.semi_max[0]:
        raise UsageError("left and right lung ranges can overlap")
    nodule = spec.structures["nodule"]
    if max(nodule.semi_max) >= min(left.semi_min + right.semi_min):
        raise UsageError("nodule radius range does not fit inside the lungs")


def _draw(rng: np.random.Generator, s: StructureRange, jitter: float) -> Tuple[np.ndarray, np.ndarray]:
    center = np.asarray(s.center) + rng.uniform(-jitter, jitter, size=3)
    semi = rng.uniform(np.asarray(s.semi_min), np.asarray(s.semi_max))
    return center, semi


def generate_phantom(spec: PhantomSpec, case_id: int = 0) -> LabeledVolume:
    """
    Build one labeled phantom.

    Args:
        spec: Phantom parameters (seed included)
        case_id: Identifier stored on the result

    Returns:
        LabeledVolume with HU in [-1000, 1000] and class ids 0-6

    Raises:
        UsageError: The spec's ranges allow out-of-body structures
    """
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    n = spec.dim
    axis = np.linspace(-1.0, 1.0, n)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")

    hu = np.full((n, n, n), HU_MIN, dtype=np.float32)
    labels = np.zeros((n, n, n), dtype=np.uint8)

    def paint(mask: np.ndarray, value: float, label: int) -> None:
        hu[mask] = value
        labels[mask] = label

    structures = spec.structures
    body = structures["body"]
    body_semi = rng.uniform(np.asarray(body.semi_min), np.asarray(body.semi_max))
    paint(((x - body.center[0]) / body_semi[0]) ** 2 + ((y - body.center[1]) / body_semi[1]) ** 2 <= 1.0,
          HU_VALUES["body"], LABELS["body"])

    lungs = {}
    for name in ("lung_right", "lung_left"):
        center, semi = _draw(rng, structures[name], spec.jitter)
        lungs[name] = (center, semi)
        mask = (((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2
                + ((z - center[2]) / semi[2]) ** 2) <= 1.0
        paint(mask, HU_VALUES["lung"], LABELS[name])

    center, semi = _draw(rng, structures["heart"], spec.jitter)
    mask = (((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2
            + ((z - center[2]) / semi[2]) ** 2) <= 1.0
    paint(mask, HU_VALUES["heart"], LABELS["heart"])

    center, semi = _draw(rng, structures["spine"], spec.jitter)
    radius = semi[0]
    paint((x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius ** 2, HU_VALUES["spine"], LABELS["spine"])

    has_nodule = rng.uniform() < spec.nodule_probability
    host = "lung_left" if rng.uniform() < 0.5 else "lung_right"
    nodule = structures["nodule"]
    nodule_radius = rng.uniform(nodule.semi_min[0], nodule.semi_max[0])
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    reach = 0.6 * rng.uniform() ** (1.0 / 3.0)
    if has_nodule:
        lung_center, lung_semi = lungs[host]
        nodule_center = lung_center + (lung_semi - nodule_radius) * direction * reach
        mask = ((x - nodule_center[0]) ** 2 + (y - nodule_center[1]) ** 2
                + (z - nodule_center[2]) ** 2) <= nodule_radius ** 2
        paint(mask, HU_VALUES["nodule"], LABELS["nodule"])

    if spec.smoothing_sigma > 0:
        hu = gaussian_filter(hu, sigma=spec.smoothing_sigma, mode="nearest").astype(np.float32)
    hu = np.clip(hu, HU_MIN, HU_MAX)
    air = labels == 0
    hu[air] = HU_MIN
    hu[~air] = np.maximum(hu[~air], HU_MIN + 1.0)

    spacing = (spec.spacing,) * 3
    return LabeledVolume(
        hu=Volume(hu, spacing, VolumeKind.HU),
        labels=Volume(labels, spacing, VolumeKind.LABELS),
        case_id=case_id,
    )


def check_invariants(case: LabeledVolume) -> List[str]:
    """Return a list of violated phantom invariants (empty when the case is valid)."""
    problems = []
    hu, labels = case.hu.data, case.labels.data
    if hu.min() < HU_MIN or hu.max() > HU_MAX:
        problems.append("hu outside [-1000, 1000]")
    if not np.array_equal(labels == 0, hu == HU_MIN):
        problems.append("label 0 does not coincide with hu == -1000")
    if labels.max() >= len(LABELS) + 1:
        problems.append("unknown class id")
    lung_l, lung_r = labels == LABELS["lung_left"], labels == LABELS["lung_right"]
    if np.any(lung_l & lung_r):
        problems.append("lungs overlap")
    return problems


def generate_dataset(
    n: int,
    base_seed: int,
    spec: Optional[PhantomSpec] = None,
    out_dir: Optional[Path] = None,
) -> List[LabeledVolume]:
    """
    Generate ``n`` phantoms; case ``i`` uses seed ``base_seed + i``.

    Args:
        n: Number of cases (>= 1)
        base_seed: Seed of case 0
        spec: Template spec (its seed is replaced per case)
        out_dir: When given, write ``case_####.hu.rvol`` / ``case_####.labels.rvol`` pairs

    Returns:
        Cases in id order
    """
    if n < 1:
        raise UsageError(f"dataset size must be >= 1, got {n}")
    spec = spec or PhantomSpec()
    validate_spec(spec)

    def build(i: int) -> LabeledVolume:
        return generate_phantom(spec.with_seed(base_seed + i), case_id=i)

    cases = parallel_map(build, range(n))
    if out_dir is not None:
        import fileio

        out_dir = Path(out_dir)
        for case in cases:
            fileio.write_case(out_dir, case)
        logger.info("Wrote %d phantom cases (dim=%d) to %s", n, spec.dim, out_dir)
    return cases

from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple

import numpy as np

HU_MIN = -1000.0
HU_MAX = 1000.0

CLASS_NAMES = ("background", "body", "lung_left", "lung_right", "heart", "spine", "nodule")
NUM_CLASSES = len(CLASS_NAMES)
FOREGROUND_CLASSES = tuple(range(1, NUM_CLASSES))


class VolumeKind(IntEnum):
    HU = 0
    LABELS = 1
    NORMALIZED = 2
    MU = 3


@dataclass
class Volume:
    """
    A 3D scalar grid indexed ``[i, j, k]`` = ``(x, y, z)`` with per-axis spacing in mm.

    Label volumes hold ``uint8`` class ids; every other kind is ``float32``.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (4.0, 4.0, 4.0)
    kind: VolumeKind = VolumeKind.HU

    def __post_init__(self):
        dtype = np.uint8 if self.kind == VolumeKind.LABELS else np.float32
        self.data = np.ascontiguousarray(self.data, dtype=dtype)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-dimensional, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.kind = VolumeKind(self.kind)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @property
    def extent_mm(self) -> Tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.shape, self.spacing))


@dataclass
class LabeledVolume:
    """A phantom case: HU volume plus its class-id volume on the same grid."""

    hu: Volume
    labels: Volume
    case_id: int = 0

    def __post_init__(self):
        if self.hu.shape != self.labels.shape:
            raise ValueError(f"hu {self.hu.shape} and labels {self.labels.shape} differ in shape")


def hu_to_normalized(hu: np.ndarray) -> np.ndarray:
    """Clip to [-1000, 1000] HU and map linearly to [0, 1]."""
    return ((np.clip(hu, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)).astype(np.float32)


def normalized_to_hu(values: np.ndarray) -> np.ndarray:
    """hu = 2000 * y - 1000."""
    return (2000.0 * np.asarray(values, dtype=np.float32) - 1000.0).astype(np.float32)

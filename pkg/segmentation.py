"""
Frozen anatomical segmentation network and the soft Dice loss.

The network is a small 3D U-Net over normalized intensity volumes with one
pooling level. It is pretrained on phantom labels with voxelwise
cross-entropy, then frozen and used inside the reconstruction loss.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import fileio
from diffcore import (
    AdamState,
    ParameterStore,
    ShapeError,
    Tensor,
    adam_step,
    avg_pool,
    concat,
    conv3d,
    log_softmax,
    no_grad,
    sine,
    sine_uniform,
    softmax,
    upsample,
)
from metrics import hard_dice
from utils import DataError, NumericError, UsageError, resident_memory_mb
from volume import CLASS_NAMES, FOREGROUND_CLASSES, NUM_CLASSES, LabeledVolume, Volume, VolumeKind, hu_to_normalized

logger = logging.getLogger(__name__)

DICE_EPS = 1e-6
SEG_SUFFIX = ".seg.rckp"
KEY_STRUCTURES = ("lung_left", "lung_right", "heart", "spine")


@dataclass
class SegSettings:
    channels: Tuple[int, int] = field(default=(8, 16))
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise UsageError(f"segmentation channels must be two positive counts, got {self.channels}")


class SegModel:
    """3D U-Net producing ``[7, D, D, D]`` class scores from a ``[1, D, D, D]`` volume."""

    def __init__(self, settings: Optional[SegSettings] = None):
        self.settings = settings or SegSettings()
        self.params = ParameterStore()
        rng = np.random.default_rng(self.settings.seed)
        c0, c1 = self.settings.channels
        for name, c_in, c_out, k in (
            ("down0.conv0", 1, c0, 3),
            ("down0.conv1", c0, c0, 3),
            ("down1.conv0", c0, c1, 3),
            ("down1.conv1", c1, c1, 3),
            ("up0.conv0", c1 + c0, c0, 3),
            ("up0.conv1", c0, c0, 3),
            ("head", c0, NUM_CLASSES, 1),
        ):
            fan_in = c_in * k ** 3
            self.params.add(f"seg.{name}.w", sine_uniform(rng, (c_out, c_in, k, k, k), fan_in))
            self.params.add(f"seg.{name}.b", np.zeros(c_out, dtype=np.float32))

    def _conv(self, name: str, x: Tensor, activate: bool = True) -> Tensor:
        w = self.params[f"seg.{name}.w"]
        out = conv3d(x, w, self.params[f"seg.{name}.b"], padding=w.shape[-1] // 2)
        return sine(out) if activate else out

    def logits(self, volume: Union[Tensor, np.ndarray]) -> Tensor:
        x = volume if isinstance(volume, Tensor) else Tensor(volume)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[0] != 1:
            raise ShapeError(f"segmentation expects a [1, D, D, D] volume, got {x.shape}")
        if any(n % 2 for n in x.shape[1:]):
            raise ShapeError(f"segmentation needs even extents, got {x.shape[1:]}")
        skip = self._conv("down0.conv1", self._conv("down0.conv0", x))
        deep = self._conv("down1.conv1", self._conv("down1.conv0", avg_pool(skip)))
        x = concat([upsample(deep), skip], axis=0)
        x = self._conv("up0.conv1", self._conv("up0.conv0", x))
        return self._conv("head", x, activate=False)

    def forward(self, volume: Union[Tensor, np.ndarray]) -> Tensor:
        """Soft mask: softmax over the class axis."""
        return softmax(self.logits(volume), axis=0)

    def segment(self, hu: Volume) -> Volume:
        """Hard labels (argmax) of an HU volume."""
        with no_grad():
            scores = self.logits(hu_to_normalized(hu.data)).data
        return Volume(np.argmax(scores, axis=0).astype(np.uint8), hu.spacing, VolumeKind.LABELS)

    def freeze(self) -> None:
        self.params.freeze()

    def save(self, path: Path) -> None:
        fileio.write_checkpoint(path, self.params.to_arrays())
        fileio.write_sidecar(path, {"model": "seg", "channels": list(self.settings.channels), "seed": self.settings.seed})

    @classmethod
    def load(cls, path: Path) -> "SegModel":
        settings = fileio.read_sidecar(path)
        if settings.get("model") != "seg":
            raise DataError(f"{path} is not a segmentation checkpoint")
        try:
            model = cls(SegSettings(channels=settings["channels"], seed=settings.get("seed", 0)))
        except (KeyError, TypeError, ValueError, UsageError) as exc:
            raise DataError(f"{fileio.sidecar_path(path)}: invalid model settings: {exc}")
        try:
            model.params.load_arrays(fileio.read_checkpoint(path))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: {exc}")
        model.freeze()
        return model


def seg_forward(volume: Union[Tensor, np.ndarray], model: SegModel) -> Tensor:
    return model.forward(volume)


def soft_dice_loss(
    pred: Union[Tensor, np.ndarray],
    ref: Union[Tensor, np.ndarray],
    classes: Sequence[int] = FOREGROUND_CLASSES,
) -> Tensor:
    """
    1 - mean over ``classes`` of (2 sum(p q) + eps) / (sum(p^2) + sum(q^2) + eps).

    Both masks are ``[C, ...]`` class probabilities.
    """
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    q = ref if isinstance(ref, Tensor) else Tensor(ref)
    if p.shape != q.shape:
        raise ShapeError(f"soft dice needs equal shapes, got {p.shape} and {q.shape}")
    if not classes:
        raise UsageError("soft dice needs at least one class")
    total = None
    for k in classes:
        pk, qk = p[k], q[k]
        dice = ((pk * qk).sum() * 2.0 + DICE_EPS) / ((pk * pk).sum() + (qk * qk).sum() + DICE_EPS)
        total = dice if total is None else total + dice
    return 1.0 - total * (1.0 / len(classes))


def one_hot(labels: np.ndarray) -> np.ndarray:
    return (np.arange(NUM_CLASSES).reshape(-1, *([1] * labels.ndim)) == labels[None]).astype(np.float32)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean voxelwise cross-entropy against integer labels."""
    return -(log_softmax(logits, axis=0) * Tensor(one_hot(labels))).sum(axis=0).mean()


def per_class_dice(pred: np.ndarray, ref: np.ndarray) -> Dict[str, float]:
    """Hard Dice for every foreground class; NaN where the class is absent from ``ref``."""
    scores = {}
    for k in FOREGROUND_CLASSES:
        present = bool(np.any(ref == k))
        scores[CLASS_NAMES[k]] = hard_dice(pred, ref, k) if present else float("nan")
    return scores


def pretrain_seg(
    train_cases: Sequence[LabeledVolume],
    epochs: int = 20,
    lr: float = 1e-3,
    seed: int = 0,
    held_out: Sequence[LabeledVolume] = (),
    settings: Optional[SegSettings] = None,
) -> Tuple[SegModel, List[float], pd.DataFrame]:
    """
    Train the segmentation network on phantom labels.

    Args:
        train_cases: Labeled phantoms
        epochs: Passes over ``train_cases``
        lr: Adam learning rate
        seed: Seeds initialization and the per-epoch case order
        held_out: Cases scored with hard Dice after training
        settings: Network size (defaults to channels 8/16)

    Returns:
        Frozen model, mean loss per epoch, and per-case Dice report
    """
    if not train_cases:
        raise UsageError("segmentation pretraining needs at least one case")
    if epochs < 1:
        raise UsageError(f"epochs must be >= 1, got {epochs}")
    settings = settings or SegSettings(seed=seed)
    model = SegModel(settings)
    state = AdamState(lr=lr)
    inputs = [(hu_to_normalized(c.hu.data), c.labels.data, c.case_id) for c in train_cases]

    epoch_losses = []
    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        order = np.random.default_rng([seed, epoch]).permutation(len(inputs))
        losses = []
        for index in order:
            x, labels, case_id = inputs[index]
            loss = cross_entropy(model.logits(x), labels)
            if not np.isfinite(loss.item()):
                raise NumericError(f"segmentation loss is {loss.item()} at epoch {epoch}, case {case_id}")
            loss.backward()
            adam_step(model.params, state)
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        logger.info(
            "seg epoch %d/%d: ce=%.4f (%.1f s, rss %.0f MB)",
            epoch, epochs, epoch_losses[-1], time.perf_counter() - started, resident_memory_mb(),
        )

    model.freeze()
    rows = []
    for case in held_out:
        scores = per_class_dice(model.segment(case.hu).data, case.labels.data)
        rows.append({"case": case.case_id, **{f"dice_{name}": value for name, value in scores.items()}})
    report = pd.DataFrame(rows, columns=["case"] + [f"dice_{CLASS_NAMES[k]}" for k in FOREGROUND_CLASSES])
    if rows:
        key = report[[f"dice_{name}" for name in KEY_STRUCTURES]].mean(axis=1, skipna=True).mean()
        logger.info("Held-out hard Dice over lungs, heart and spine: %.3f (%d cases)", key, len(rows))
    return model, epoch_losses, report

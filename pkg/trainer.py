"""
Supervised training of the reconstruction model.

One step draws a uniform subset of voxel centers from one case, scores the
prediction with MSE in normalized intensity and, every ``dice_every`` steps
when the Dice weight is positive, adds the soft Dice between the frozen
segmenter's masks of the full predicted volume and of the ground truth.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import fileio
from diffcore import AdamState, Tensor, adam_step, concat, no_grad
from drr import DRRImage
from geometry import ViewGeometry, voxel_grid
from metrics import psnr
from recon_model import ReconModel
from segmentation import SegModel, soft_dice_loss
from utils import DataError, NumericError, UsageError, resident_memory_mb
from volume import LabeledVolume, hu_to_normalized

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "mse", "dice_loss", "val_psnr", "seconds", "lr"]
STATE_FILE = "train_state.rckp"
BEST_FILE = "model_best.rckp"
FINAL_FILE = "model_final.rckp"
LOG_FILE = "train_log.csv"


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 3e-5
    lr_after: float = 3e-6
    drop_epoch: int = 51
    points_per_step: int = 4096
    lam: float = 0.0
    views: List[float] = field(default_factory=lambda: [0.0, 90.0])
    seed: int = 0
    dice_every: int = 4
    chunk: int = 4096

    def __post_init__(self):
        if self.lam < 0:
            raise UsageError(f"lambda must be >= 0, got {self.lam}")
        if not 1 <= len(self.views) <= 4:
            raise UsageError(f"training needs 1 to 4 views, got {len(self.views)}")
        if self.epochs < 1 or self.points_per_step < 1 or self.dice_every < 1:
            raise UsageError("epochs, points_per_step and dice_every must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.drop_epoch else self.lr_after


@dataclass
class TrainingCase:
    """Input views plus the flattened normalized target of one phantom."""

    case_id: int
    views: List[Tuple[np.ndarray, ViewGeometry]]
    target: np.ndarray
    dim: int
    seg_target: Optional[np.ndarray] = None

    @classmethod
    def from_case(cls, case: LabeledVolume, images: Sequence[DRRImage]) -> "TrainingCase":
        dim = case.hu.shape[0]
        if case.hu.shape != (dim, dim, dim):
            raise UsageError(f"case {case.case_id}: training needs a cubic volume, got {case.hu.shape}")
        views = [(image.normalized, image.geometry) for image in images]
        return cls(case.case_id, views, hu_to_normalized(case.hu.data).reshape(-1), dim)

    def segmentation_target(self, seg: SegModel) -> np.ndarray:
        if self.seg_target is None:
            with no_grad():
                self.seg_target = seg.forward(self.target.reshape(1, self.dim, self.dim, self.dim)).data
        return self.seg_target


@dataclass
class StepResult:
    loss: float
    mse: float
    dice: Optional[float]
    grad_norms: Dict[str, float]


def step_losses(
    pred: Tensor,
    target: np.ndarray,
    lam: float = 0.0,
    pred_volume: Optional[Tensor] = None,
    seg: Optional[SegModel] = None,
    seg_target: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    """
    total = mean((pred - target)^2) + lam * soft_dice(S(pred_volume), S(target)).

    The Dice term is added only when ``lam > 0`` and ``pred_volume`` is given.

    Returns:
        ``(total, mse, dice)``; ``dice`` is None when the term is skipped
    """
    diff = pred - Tensor(np.asarray(target, dtype=np.float32))
    mse = (diff * diff).mean()
    if lam <= 0 or pred_volume is None:
        return mse, mse, None
    if seg is None or seg_target is None:
        raise UsageError("the Dice term needs a segmentation model and its target masks")
    n = round(pred_volume.size ** (1.0 / 3.0))
    dice = soft_dice_loss(seg.forward(pred_volume.reshape(1, n, n, n)), seg_target)
    return mse + dice * lam, mse, dice


class Trainer:
    """
    Owns the optimizer state and the global step counter of one training run.

    Args:
        model: Model to train in place
        cfg: Schedule, sampling and loss weights
        seg: Frozen segmenter (required when ``cfg.lam > 0``)
    """

    def __init__(self, model: ReconModel, cfg: TrainConfig, seg: Optional[SegModel] = None):
        if cfg.lam > 0 and seg is None:
            raise UsageError("lambda > 0 needs a pretrained segmentation checkpoint")
        self.model = model
        self.cfg = cfg
        self.seg = seg
        self.state = AdamState(lr=cfg.lr)
        self.step = 0
        self._grids: Dict[int, np.ndarray] = {}

    def _grid(self, dim: int) -> np.ndarray:
        if dim not in self._grids:
            self._grids[dim] = voxel_grid(dim)
        return self._grids[dim]

    def train_step(self, case: TrainingCase, rng: np.random.Generator) -> StepResult:
        cfg, model = self.cfg, self.model
        if len(case.views) != len(cfg.views):
            raise UsageError(f"case {case.case_id} has {len(case.views)} views, config expects {len(cfg.views)}")
        grid = self._grid(case.dim)
        picks = rng.choice(len(grid), size=min(cfg.points_per_step, len(grid)), replace=False)

        features = [model.extract_features(image) for image, _ in case.views]
        geometries = [g for _, g in case.views]
        pred = model.predict(grid[picks], features, geometries)

        pred_volume = None
        seg_target = None
        if cfg.lam > 0 and self.step % cfg.dice_every == 0:
            parts = [model.predict(grid[i:i + cfg.chunk], features, geometries) for i in range(0, len(grid), cfg.chunk)]
            pred_volume = parts[0] if len(parts) == 1 else concat(parts, axis=0)
            seg_target = case.segmentation_target(self.seg)

        total, mse, dice = step_losses(pred, case.target[picks], cfg.lam, pred_volume, self.seg, seg_target)
        value = total.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {self.step}, case {case.case_id}")

        total.backward()
        norms = {
            name: (float(np.linalg.norm(t.grad)) if t.grad is not None else float("nan"))
            for name, t in model.params.trainable()
        }
        adam_step(model.params, self.state)
        result = StepResult(value, mse.item(), None if dice is None else dice.item(), norms)
        logger.debug("step %d case %d: loss=%.6f mse=%.6f dice=%s", self.step, case.case_id, result.loss,
                     result.mse, "-" if result.dice is None else f"{result.dice:.4f}")
        self.step += 1
        return result

    def validation_psnr(self, cases: Sequence[TrainingCase]) -> float:
        if not cases:
            return float("nan")
        scores = []
        for case in cases:
            recon = self.model.reconstruct_volume(case.views, case.dim, chunk=self.cfg.chunk, normalized=True)
            scores.append(psnr(recon.data.reshape(-1), case.target))
        return float(np.mean(scores))

    # --- checkpoints ----------------------------------------------------

    def save_state(self, path: Path, epoch: int) -> None:
        arrays = dict(self.model.params.to_arrays())
        arrays.update(self.state.to_arrays())
        arrays["train.epoch"] = np.array([epoch], dtype=np.float32)
        arrays["train.step"] = np.array([self.step], dtype=np.float32)
        fileio.write_checkpoint(path, arrays)
        fileio.write_sidecar(path, {"model": "recon", **self.model.settings.to_dict()})

    def load_state(self, path: Path) -> int:
        """Restore parameters, optimizer moments and step counter; returns the completed epoch."""
        arrays = fileio.read_checkpoint(path)
        try:
            self.model.params.load_arrays(arrays)
            self.state.load_arrays(arrays)
            epoch = int(arrays["train.epoch"][0])
            self.step = int(arrays["train.step"][0])
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: not a resumable training state ({exc})")
        return epoch

    # --- epochs ---------------------------------------------------------

    def fit(
        self,
        train_cases: Sequence[TrainingCase],
        val_cases: Sequence[TrainingCase],
        out_dir: Optional[Path] = None,
        resume: bool = False,
    ) -> pd.DataFrame:
        """
        Run the epoch loop and return the training log.

        Writes ``model_best.rckp`` (highest validation PSNR),
        ``model_final.rckp``, ``train_state.rckp`` and ``train_log.csv``
        when ``out_dir`` is given. With ``resume`` the loop continues after
        the epoch stored in ``train_state.rckp``.
        """
        if not train_cases:
            raise UsageError("training needs at least one case")
        cfg = self.cfg
        out_dir = Path(out_dir) if out_dir is not None else None
        rows: List[Dict] = []
        best = -np.inf
        start = 0

        if resume:
            if out_dir is None or not (out_dir / STATE_FILE).exists():
                raise DataError(f"nothing to resume: {out_dir}/{STATE_FILE} is missing")
            start = self.load_state(out_dir / STATE_FILE)
            if (out_dir / LOG_FILE).exists():
                previous = fileio.read_csv(out_dir / LOG_FILE)
                previous = previous[previous["epoch"] <= start]
                rows = previous.to_dict("records")
                trained = previous.loc[previous["epoch"] > 0, "val_psnr"].dropna()
                if len(trained):
                    best = float(trained.max())
            logger.info("Resuming after epoch %d (step %d)", start, self.step)
        else:
            if out_dir is not None:
                # a fresh fit never inherits the best checkpoint of an earlier run
                for stale in (out_dir / BEST_FILE, fileio.sidecar_path(out_dir / BEST_FILE)):
                    stale.unlink(missing_ok=True)
            started = time.perf_counter()
            baseline = self.validation_psnr(val_cases)
            rows.append({"epoch": 0, "mse": np.nan, "dice_loss": np.nan, "val_psnr": baseline,
                         "seconds": time.perf_counter() - started, "lr": cfg.lr})
            logger.info("epoch 0: val_psnr=%.2f dB (untrained)", baseline)

        for epoch in range(start + 1, cfg.epochs + 1):
            started = time.perf_counter()
            self.state.lr = cfg.lr_at(epoch)
            rng = np.random.default_rng([cfg.seed, epoch])
            results = [self.train_step(train_cases[i], rng) for i in rng.permutation(len(train_cases))]
            dice_values = [r.dice for r in results if r.dice is not None]
            val = self.validation_psnr(val_cases)
            row = {
                "epoch": epoch,
                "mse": float(np.mean([r.mse for r in results])),
                "dice_loss": float(np.mean(dice_values)) if dice_values else np.nan,
                "val_psnr": val,
                "seconds": time.perf_counter() - started,
                "lr": self.state.lr,
            }
            rows.append(row)
            logger.info(
                "epoch %d/%d: mse=%.6f dice=%s val_psnr=%.2f dB lr=%.1e (%.1f s, rss %.0f MB)",
                epoch, cfg.epochs, row["mse"], "-" if np.isnan(row["dice_loss"]) else f"{row['dice_loss']:.4f}",
                val, row["lr"], row["seconds"], resident_memory_mb(),
            )
            if out_dir is not None:
                if val > best:
                    self.model.save(out_dir / BEST_FILE)
                self.save_state(out_dir / STATE_FILE, epoch)
                fileio.write_csv(out_dir / LOG_FILE, pd.DataFrame(rows, columns=LOG_COLUMNS))
            best = max(best, val)

        log = pd.DataFrame(rows, columns=LOG_COLUMNS)
        if out_dir is not None:
            self.model.save(out_dir / FINAL_FILE)
            if not (out_dir / BEST_FILE).exists():
                self.model.save(out_dir / BEST_FILE)
            fileio.write_csv(out_dir / LOG_FILE, log)
        return log


def train(
    train_cases: Sequence[TrainingCase],
    val_cases: Sequence[TrainingCase],
    cfg: TrainConfig,
    model: Optional[ReconModel] = None,
    seg: Optional[SegModel] = None,
    out_dir: Optional[Path] = None,
) -> Tuple[ReconModel, pd.DataFrame]:
    """Train a (new, unless given) model and return it with its TrainLog."""
    model = model or ReconModel()
    log = Trainer(model, cfg, seg).fit(train_cases, val_cases, out_dir)
    return model, log

"""
Run configuration: flat ``key=value`` text with documented defaults.

Lines starting with ``#`` and blank lines are ignored; list values are comma
separated. Unknown keys are rejected.
"""

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

from geometry import VIEW_SUBSETS, Beam, ViewGeometry
from utils import UsageError, format_float_list, parse_float_list

logger = logging.getLogger(__name__)

# config keys that are not valid Python identifiers
KEY_ALIASES = {"lambda": "lambdas"}
FIELD_KEYS = {v: k for k, v in KEY_ALIASES.items()}


def _doc(text: str) -> Dict[str, str]:
    return {"help": text}


@dataclass
class RunConfig:
    data_dir: str = field(default="data", metadata=_doc("phantom volumes and rendered views"))
    out_dir: str = field(default="runs/desk", metadata=_doc("checkpoints, CSVs, images and the report"))
    dim: int = field(default=32, metadata=_doc("voxels per side"))
    spacing: float = field(default=4.0, metadata=_doc("mm per voxel"))
    n_train: int = field(default=30, metadata=_doc("training cases"))
    n_val: int = field(default=5, metadata=_doc("validation cases (best-checkpoint selection)"))
    n_test: int = field(default=10, metadata=_doc("test cases"))
    seed: int = field(default=0, metadata=_doc("single source of all randomness"))
    views: List[float] = field(default_factory=lambda: [0.0, 45.0, 90.0, 135.0],
                               metadata=_doc("rendered acquisition angles in degrees"))
    eval_views: List[int] = field(default_factory=lambda: [1, 2, 4], metadata=_doc("view counts trained and evaluated"))
    beam: str = field(default="parallel", metadata=_doc("parallel, cone or fan"))
    source_dist: float = field(default=3.0, metadata=_doc("cone source distance, normalized units"))
    detector_dist: float = field(default=1.0, metadata=_doc("cone detector distance, normalized units"))
    detector_px: int = field(default=32, metadata=_doc("detector pixels per side"))
    step_vox: float = field(default=0.25, metadata=_doc("DRR sampling step in voxels"))
    mu_water: float = field(default=0.0227, metadata=_doc("water attenuation in 1/mm"))
    lambdas: List[float] = field(default_factory=lambda: [0.1], metadata=_doc("Dice loss weights (0 disables)"))
    epochs: int = field(default=100, metadata=_doc("reconstruction training epochs"))
    lr: float = field(default=3e-5, metadata=_doc("initial learning rate"))
    lr_after: float = field(default=3e-6, metadata=_doc("learning rate after the drop"))
    lr_drop_epoch: int = field(default=0, metadata=_doc("first epoch at lr_after (0: half of epochs)"))
    points_per_step: int = field(default=4096, metadata=_doc("voxel centers sampled per step"))
    dice_every: int = field(default=4, metadata=_doc("apply the Dice term every n-th step"))
    chunk: int = field(default=4096, metadata=_doc("points per inference batch"))
    features: int = field(default=32, metadata=_doc("feature channels per view"))
    frequencies: int = field(default=32, metadata=_doc("Fourier frequencies"))
    fourier_sigma: float = field(default=3.0, metadata=_doc("std of the Fourier frequency matrix"))
    width: int = field(default=128, metadata=_doc("MLP width"))
    seg_epochs: int = field(default=20, metadata=_doc("segmentation pretraining epochs"))
    seg_lr: float = field(default=1e-3, metadata=_doc("segmentation learning rate"))
    mu_mv: float = field(default=0.0025, metadata=_doc("megavoltage attenuation for the dose surrogate, 1/mm"))
    figures: bool = field(default=True, metadata=_doc("write PNG figures and the HTML report"))

    def __post_init__(self):
        self.validate()

    # --- parsing -------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values: Dict[str, str] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{source}:{number}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values, source)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}")
        return cls.from_text(text, str(path))

    @classmethod
    def from_mapping(cls, values: Dict[str, str], source: str = "<config>") -> "RunConfig":
        return cls().with_overrides(values, source)

    def with_overrides(self, values: Dict[str, str], source: str = "<overrides>") -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        updates = {}
        for key, value in values.items():
            name = KEY_ALIASES.get(key, key)
            if name not in known or key in FIELD_KEYS:
                raise UsageError(f"{source}: unknown config key {key!r}")
            updates[name] = _coerce(key, value, getattr(self, name))
        return replace(self, **updates)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, list):
                text = format_float_list(value)
            else:
                text = f"{value:g}" if isinstance(value, float) else str(value)
            lines.append(f"# {f.metadata.get('help', '')}")
            lines.append(f"{FIELD_KEYS.get(f.name, f.name)}={text}")
        return "\n".join(lines) + "\n"

    # --- checks and derived values ------------------------------------

    def validate(self) -> None:
        def need(ok: bool, message: str) -> None:
            if not ok:
                raise UsageError(message)

        need(self.dim >= 16 and self.dim % 2 == 0, f"dim must be an even number >= 16, got {self.dim}")
        need(self.spacing > 0, f"spacing must be positive, got {self.spacing}")
        need(self.n_train >= 1 and self.n_val >= 1 and self.n_test >= 1,
             f"n_train, n_val and n_test must be >= 1, got {self.n_train}/{self.n_val}/{self.n_test}")
        need(len(self.views) >= 1, "views must list at least one angle")
        need(all(1 <= k <= 4 for k in self.eval_views), f"eval_views must lie in 1..4, got {self.eval_views}")
        rendered = {float(v) % 360.0 for v in self.views}
        for k in self.eval_views:
            missing = [a for a in VIEW_SUBSETS[k] if a not in rendered]
            need(not missing, f"{k}-view models need angles {format_float_list(missing)} in views")
        need(all(lam >= 0 for lam in self.lambdas), f"lambda must be >= 0, got {format_float_list(self.lambdas)}")
        need(self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")
        need(0 <= self.lr_drop_epoch <= self.epochs, f"lr_drop_epoch must be in [0, epochs], got {self.lr_drop_epoch}")
        need(self.points_per_step >= 1 and self.chunk >= 1 and self.dice_every >= 1,
             "points_per_step, chunk and dice_every must be >= 1")
        need(0 < self.step_vox <= 1, f"step_vox must be in (0, 1], got {self.step_vox}")
        need(self.detector_px % 4 == 0, f"detector_px must be divisible by 4, got {self.detector_px}")
        need(self.seg_epochs >= 1, f"seg_epochs must be >= 1, got {self.seg_epochs}")
        Beam.parse(self.beam)

    @property
    def drop_epoch(self) -> int:
        return self.lr_drop_epoch or max(1, self.epochs // 2 + 1)

    def geometry(self, theta_deg: float = 0.0) -> ViewGeometry:
        return ViewGeometry(Beam.parse(self.beam), theta_deg, self.detector_px, self.source_dist, self.detector_dist)

    def split(self) -> Dict[str, List[int]]:
        """Consecutive case ids per split."""
        ids = list(range(self.n_train + self.n_val + self.n_test))
        return {
            "train": ids[: self.n_train],
            "val": ids[self.n_train: self.n_train + self.n_val],
            "test": ids[self.n_train + self.n_val:],
        }


def _coerce(key: str, text: str, current) -> object:
    text = text.strip()
    if isinstance(current, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected true/false, got {text!r}")
    if isinstance(current, list):
        values = parse_float_list(text, key)
        if current and isinstance(current[0], int):
            if any(v != int(v) for v in values):
                raise UsageError(f"{key}: expected whole numbers, got {text!r}")
            return [int(v) for v in values]
        return values
    try:
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError:
        raise UsageError(f"{key}: {text!r} is not a valid {type(current).__name__}")
    return text


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    cfg = RunConfig.from_file(path) if path else RunConfig()
    return cfg.with_overrides(overrides) if overrides else cfg

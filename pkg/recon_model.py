"""
Conditional implicit reconstruction network.

A 2D U-Net turns every input view into a per-pixel feature image. A 3D point
is projected into each view, the aligned feature vector is sampled
bilinearly and concatenated with a Fourier encoding of the point, and a
per-view sine MLP embeds the pair. Embeddings are averaged over views and a
second sine MLP decodes the average into a normalized intensity in [0, 1].
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import fileio
from diffcore import (
    ParameterStore,
    Tensor,
    avg_pool,
    bilinear_sample,
    concat,
    conv2d,
    linear,
    no_grad,
    sigmoid,
    sine,
    sine_uniform,
    upsample,
)
from geometry import ViewGeometry, detector_to_pixel, project, voxel_grid
from utils import DataError, UsageError, parallel_map
from volume import Volume, VolumeKind, normalized_to_hu

logger = logging.getLogger(__name__)

MAX_VIEWS = 4


@dataclass
class ReconSettings:
    """Hyperparameters that fix every parameter shape; written next to each checkpoint."""

    detector_px: int = 32
    features: int = 32
    frequencies: int = 32
    fourier_sigma: float = 3.0
    width: int = 128
    blocks: int = 3
    first_omega: float = 30.0
    unet_channels: Tuple[int, ...] = field(default=(16, 32, 64))
    seed: int = 0

    def __post_init__(self):
        self.unet_channels = tuple(int(c) for c in self.unet_channels)
        levels = len(self.unet_channels) - 1
        if levels < 1:
            raise UsageError("the feature U-Net needs at least two channel levels")
        if self.detector_px % (2 ** levels):
            raise UsageError(f"detector size {self.detector_px} is not divisible by {2 ** levels}")
        for name in ("features", "frequencies", "width", "blocks"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["unet_channels"] = list(self.unet_channels)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ReconSettings":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown model settings: {', '.join(sorted(unknown))}")
        return cls(**data)


def fourier_encode(points: np.ndarray, B: np.ndarray) -> Tensor:
    """
    gamma(p) = [sin(2 pi B p), cos(2 pi B p)].

    Args:
        points: ``[3]`` or ``[N, 3]`` normalized coordinates
        B: ``[m, 3]`` frequency matrix

    Returns:
        ``[2m]`` or ``[N, 2m]`` constant tensor
    """
    pts = np.asarray(points, dtype=np.float64)
    angles = 2.0 * np.pi * (pts @ np.asarray(B, dtype=np.float64).T)
    return Tensor(np.concatenate([np.sin(angles), np.cos(angles)], axis=-1))


class ReconModel:
    """
    Feature U-Net, Fourier encoding, per-view MLP and fusion MLP in one parameter store.

    Parameter names are prefixed ``unet.``, ``fourier.``, ``f_rho.`` and
    ``h_tau.``; ``fourier.B`` is frozen.
    """

    def __init__(self, settings: Optional[ReconSettings] = None):
        self.settings = settings or ReconSettings()
        self.params = ParameterStore()
        self._build(np.random.default_rng(self.settings.seed))

    # --- construction -------------------------------------------------

    def _conv(self, rng: np.random.Generator, name: str, c_in: int, c_out: int, k: int = 3) -> None:
        fan_in = c_in * k * k
        self.params.add(f"{name}.w", sine_uniform(rng, (c_out, c_in, k, k), fan_in))
        self.params.add(f"{name}.b", np.zeros(c_out, dtype=np.float32))

    def _dense(self, rng: np.random.Generator, name: str, n_in: int, n_out: int, omega: float = 1.0) -> None:
        self.params.add(f"{name}.w", sine_uniform(rng, (n_in, n_out), n_in, omega))
        self.params.add(f"{name}.b", np.zeros(n_out, dtype=np.float32))

    def _build(self, rng: np.random.Generator) -> None:
        s = self.settings
        channels = s.unet_channels
        c_prev = 1
        for level, c in enumerate(channels):
            self._conv(rng, f"unet.down{level}.conv0", c_prev, c)
            self._conv(rng, f"unet.down{level}.conv1", c, c)
            c_prev = c
        for level in reversed(range(len(channels) - 1)):
            c = channels[level]
            self._conv(rng, f"unet.up{level}.conv0", c_prev + c, c)
            self._conv(rng, f"unet.up{level}.conv1", c, c)
            c_prev = c
        self._conv(rng, "unet.head", c_prev, s.features, k=1)

        B = rng.normal(0.0, s.fourier_sigma, size=(s.frequencies, 3)).astype(np.float32)
        self.params.add("fourier.B", B, trainable=False)

        self._dense(rng, "f_rho.in", 2 * s.frequencies + s.features, s.width, s.first_omega)
        for mlp in ("f_rho", "h_tau"):
            for i in range(s.blocks):
                self._dense(rng, f"{mlp}.block{i}.l1", s.width, s.width)
                self._dense(rng, f"{mlp}.block{i}.l2", s.width, s.width)
        self._dense(rng, "h_tau.out", s.width, 1)

    # --- forward pieces ------------------------------------------------

    def _apply_conv(self, name: str, x: Tensor, activate: bool = True) -> Tensor:
        w = self.params[f"{name}.w"]
        out = conv2d(x, w, self.params[f"{name}.b"], padding=w.shape[-1] // 2)
        return sine(out) if activate else out

    def _residual(self, prefix: str, x: Tensor) -> Tensor:
        for i in range(self.settings.blocks):
            p = f"{prefix}.block{i}"
            hidden = sine(linear(x, self.params[f"{p}.l1.w"], self.params[f"{p}.l1.b"]))
            x = x + linear(hidden, self.params[f"{p}.l2.w"], self.params[f"{p}.l2.b"])
        return x

    def extract_features(self, image: np.ndarray) -> Tensor:
        """``[d, d]`` (or ``[1, d, d]``) normalized view to a ``[c, d, d]`` feature image."""
        x = Tensor(np.asarray(image, dtype=np.float32).reshape(1, *np.shape(image)[-2:]))
        d = self.settings.detector_px
        if x.shape[1:] != (d, d):
            raise UsageError(f"view is {x.shape[1]}x{x.shape[2]}, model expects {d}x{d}")
        levels = len(self.settings.unet_channels)
        skips = []
        for level in range(levels):
            x = self._apply_conv(f"unet.down{level}.conv0", x)
            x = self._apply_conv(f"unet.down{level}.conv1", x)
            if level < levels - 1:
                skips.append(x)
                x = avg_pool(x)
        for level in reversed(range(levels - 1)):
            x = concat([upsample(x), skips[level]], axis=0)
            x = self._apply_conv(f"unet.up{level}.conv0", x)
            x = self._apply_conv(f"unet.up{level}.conv1", x)
        return self._apply_conv("unet.head", x, activate=False)

    def per_view_embed(self, points: np.ndarray, features: Tensor, g: ViewGeometry) -> Tensor:
        """``[N, width]`` embeddings of ``points`` seen through one view."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        coords = detector_to_pixel(project(pts, g), features.shape[-1])
        sampled = bilinear_sample(features, coords)
        encoded = fourier_encode(pts, self.params["fourier.B"].data)
        x = concat([encoded, sampled], axis=1)
        x = sine(linear(x, self.params["f_rho.in.w"], self.params["f_rho.in.b"]), self.settings.first_omega)
        return self._residual("f_rho", x)

    def fuse_and_decode(self, embeddings: Sequence[Tensor]) -> Tensor:
        """Average the per-view embeddings and decode to ``[N]`` intensities in [0, 1]."""
        if not embeddings:
            raise UsageError("fuse_and_decode needs at least one view embedding")
        total = embeddings[0]
        for r in embeddings[1:]:
            total = total + r
        fused = total * (1.0 / len(embeddings)) if len(embeddings) > 1 else total
        x = self._residual("h_tau", fused)
        out = sigmoid(linear(x, self.params["h_tau.out.w"], self.params["h_tau.out.b"]))
        return out.reshape(-1)

    def predict(self, points: np.ndarray, features: Sequence[Tensor], geometries: Sequence[ViewGeometry]) -> Tensor:
        if len(features) != len(geometries):
            raise UsageError(f"{len(features)} feature images for {len(geometries)} geometries")
        return self.fuse_and_decode([self.per_view_embed(points, w, g) for w, g in zip(features, geometries)])

    # --- whole volumes -------------------------------------------------

    @staticmethod
    def _check_views(views: Sequence[Tuple[np.ndarray, ViewGeometry]]) -> None:
        if not 1 <= len(views) <= MAX_VIEWS:
            raise UsageError(f"reconstruction needs 1 to {MAX_VIEWS} views, got {len(views)}")

    def predict_volume(self, views: Sequence[Tuple[np.ndarray, ViewGeometry]], dim: int, chunk: int = 4096) -> Tensor:
        """All ``dim**3`` normalized intensities on the current tape, in C order of ``(i, j, k)``."""
        self._check_views(views)
        features = [self.extract_features(image) for image, _ in views]
        geometries = [g for _, g in views]
        grid = voxel_grid(dim)
        parts = [self.predict(grid[i:i + chunk], features, geometries) for i in range(0, len(grid), chunk)]
        return parts[0] if len(parts) == 1 else concat(parts, axis=0)

    def reconstruct_volume(
        self,
        views: Sequence[Tuple[np.ndarray, ViewGeometry]],
        dim: int,
        spacing: float = 4.0,
        chunk: int = 4096,
        normalized: bool = False,
        workers: Optional[int] = None,
    ) -> Volume:
        """
        Evaluate the model at every voxel center.

        Args:
            views: ``(normalized image, geometry)`` per view, 1 to 4 of them
            dim: Voxels per side of the output
            spacing: Output voxel size in mm
            chunk: Points evaluated per batch (evaluation order only)
            normalized: Return [0, 1] intensities instead of HU
            workers: Threads for the point chunks; pass 1 when already inside a pool

        Returns:
            HU (or normalized) volume of shape ``(dim, dim, dim)``
        """
        self._check_views(views)
        if chunk < 1:
            raise UsageError(f"chunk must be >= 1, got {chunk}")
        with no_grad():
            features = [self.extract_features(image) for image, _ in views]
        geometries = [g for _, g in views]
        grid = voxel_grid(dim)

        def run(start: int) -> np.ndarray:
            with no_grad():
                return self.predict(grid[start:start + chunk], features, geometries).data

        values = np.concatenate(parallel_map(run, range(0, len(grid), chunk), workers)).reshape(dim, dim, dim)
        if normalized:
            return Volume(values, (spacing,) * 3, VolumeKind.NORMALIZED)
        return Volume(normalized_to_hu(values), (spacing,) * 3, VolumeKind.HU)

    # --- persistence ---------------------------------------------------

    def save(self, path: Path) -> None:
        fileio.write_checkpoint(path, self.params.to_arrays())
        fileio.write_sidecar(path, {"model": "recon", **self.settings.to_dict()})

    @classmethod
    def load(cls, path: Path) -> "ReconModel":
        settings = dict(fileio.read_sidecar(path))
        if settings.pop("model", "recon") != "recon":
            raise DataError(f"{path} is not a reconstruction checkpoint")
        try:
            model = cls(ReconSettings.from_dict(settings))
        except (TypeError, ValueError, UsageError) as exc:
            raise DataError(f"{fileio.sidecar_path(path)}: invalid model settings: {exc}")
        try:
            model.params.load_arrays(fileio.read_checkpoint(path))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: {exc}")
        return model

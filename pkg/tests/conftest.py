"""Shared fixtures: seeded generators, small phantoms and tiny networks."""

import numpy as np
import pytest

from config import RunConfig
from geometry import Beam, ViewGeometry
from phantom import PhantomSpec, generate_phantom
from recon_model import ReconModel, ReconSettings
from segmentation import SegModel, SegSettings
from volume import LabeledVolume, Volume, VolumeKind


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    """16^3 phantoms with 8 mm voxels (same physical size as the desk default)."""
    return PhantomSpec(seed=3, dim=16, spacing=8.0)


@pytest.fixture
def small_case(small_spec):
    return generate_phantom(small_spec, case_id=0)


@pytest.fixture
def water_cube():
    """32^3 water at 4 mm, as an attenuation volume."""
    return Volume(np.full((32, 32, 32), 0.0227, dtype=np.float32), (4.0, 4.0, 4.0), VolumeKind.MU)


@pytest.fixture
def tiny_settings():
    return ReconSettings(detector_px=16, features=4, frequencies=4, width=16, blocks=1,
                         unet_channels=(4, 8), seed=5)


@pytest.fixture
def tiny_model(tiny_settings):
    return ReconModel(tiny_settings)


@pytest.fixture
def tiny_seg():
    return SegModel(SegSettings(channels=(4, 8), seed=2))


@pytest.fixture
def parallel_geometry():
    return ViewGeometry(Beam.PARALLEL, 0.0, detector_px=16)


@pytest.fixture
def smoke_config(tmp_path):
    """Every stage in seconds: two training phantoms, one epoch, tiny networks."""
    return RunConfig(
        data_dir=str(tmp_path / "data"),
        out_dir=str(tmp_path / "runs"),
        dim=16,
        spacing=8.0,
        n_train=2,
        n_val=1,
        n_test=1,
        views=[0.0, 90.0],
        eval_views=[1, 2],
        detector_px=16,
        lambdas=[0.1],
        epochs=1,
        points_per_step=256,
        dice_every=1,
        chunk=2048,
        features=4,
        frequencies=4,
        width=16,
        seg_epochs=1,
        step_vox=0.5,
        figures=False,
    )


@pytest.fixture
def make_case():
    """Factory for a LabeledVolume from raw HU and label arrays."""

    def build(hu, labels, spacing=4.0, case_id=0):
        return LabeledVolume(
            Volume(hu, (spacing,) * 3, VolumeKind.HU),
            Volume(labels, (spacing,) * 3, VolumeKind.LABELS),
            case_id,
        )

    return build

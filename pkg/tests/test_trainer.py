"""Tests for the reconstruction training loop."""

import numpy as np
import pandas as pd
import pytest

import fileio
from diffcore import Tensor
from drr import hu_to_mu, render_views
from geometry import ViewGeometry
from recon_model import ReconModel, ReconSettings
from segmentation import soft_dice_loss
from trainer import (
    BEST_FILE,
    FINAL_FILE,
    LOG_COLUMNS,
    LOG_FILE,
    STATE_FILE,
    TrainConfig,
    Trainer,
    TrainingCase,
    step_losses,
    train,
)
from utils import DataError, NumericError, UsageError


@pytest.fixture
def training_case(small_case):
    images = render_views(hu_to_mu(small_case.hu), [0.0, 90.0], ViewGeometry(detector_px=16))
    return TrainingCase.from_case(small_case, images)


@pytest.fixture
def quick_config():
    return TrainConfig(epochs=2, lr=1e-3, lr_after=1e-4, drop_epoch=2, points_per_step=64, chunk=1024)


class TestTrainConfig:
    def test_negative_lambda(self):
        with pytest.raises(UsageError):
            TrainConfig(lam=-0.1)

    def test_view_count(self):
        with pytest.raises(UsageError):
            TrainConfig(views=[0, 45, 90, 135, 180])

    def test_learning_rate_drop(self):
        cfg = TrainConfig(lr=1e-3, lr_after=1e-4, drop_epoch=3)
        assert [cfg.lr_at(e) for e in (1, 2, 3, 4)] == [1e-3, 1e-3, 1e-4, 1e-4]


class TestStepLosses:
    def test_perfect_prediction(self):
        total, mse, dice = step_losses(Tensor([0.2, 0.4]), np.array([0.2, 0.4]))
        assert total.item() == pytest.approx(0.0, abs=1e-12)
        assert mse is total and dice is None

    def test_mse_value(self):
        _, mse, _ = step_losses(Tensor([0.0, 1.0]), np.array([0.5, 0.5]))
        assert mse.item() == pytest.approx(0.25)

    def test_dice_term_needs_segmenter(self):
        with pytest.raises(UsageError):
            step_losses(Tensor([0.0]), np.array([0.0]), lam=0.5, pred_volume=Tensor(np.zeros(8)))

    def test_weighted_sum(self, tiny_seg, rng):
        target = rng.uniform(0, 1, size=512).astype(np.float32)
        pred = Tensor(rng.uniform(0, 1, size=512))
        seg_target = tiny_seg.forward(target.reshape(1, 8, 8, 8)).data
        total, mse, dice = step_losses(pred, target, 0.5, pred, tiny_seg, seg_target)
        expected = soft_dice_loss(tiny_seg.forward(pred.data.reshape(1, 8, 8, 8)), seg_target).item()
        assert dice.item() == pytest.approx(expected, rel=1e-5)
        assert total.item() == pytest.approx(mse.item() + 0.5 * expected, rel=1e-5)


class TestTrainStep:
    def test_lambda_needs_segmenter(self, tiny_model):
        with pytest.raises(UsageError):
            Trainer(tiny_model, TrainConfig(lam=0.1))

    def test_step_updates_parameters(self, tiny_model, training_case, quick_config):
        before = tiny_model.params["h_tau.out.w"].data.copy()
        trainer = Trainer(tiny_model, quick_config)
        result = trainer.train_step(training_case, np.random.default_rng(0))
        assert np.isfinite(result.loss) and result.dice is None
        assert result.loss == result.mse
        assert not np.array_equal(before, tiny_model.params["h_tau.out.w"].data)
        assert trainer.step == 1
        assert set(result.grad_norms) == {name for name, _ in tiny_model.params.trainable()}

    def test_dice_every_other_step(self, tiny_model, tiny_seg, training_case):
        tiny_seg.freeze()
        cfg = TrainConfig(epochs=1, lr=1e-3, lam=0.1, dice_every=2, points_per_step=64, chunk=2048)
        trainer = Trainer(tiny_model, cfg, tiny_seg)
        rng = np.random.default_rng(0)
        first = trainer.train_step(training_case, rng)
        second = trainer.train_step(training_case, rng)
        assert first.dice is not None and 0.0 <= first.dice <= 1.0
        assert first.loss == pytest.approx(first.mse + 0.1 * first.dice, rel=1e-5)
        assert second.dice is None
        assert training_case.seg_target is not None

    def test_view_count_mismatch(self, tiny_model, training_case):
        trainer = Trainer(tiny_model, TrainConfig(views=[0.0]))
        with pytest.raises(UsageError):
            trainer.train_step(training_case, np.random.default_rng(0))

    def test_non_finite_loss(self, tiny_model, training_case, quick_config):
        training_case.target = np.full_like(training_case.target, np.nan)
        with pytest.raises(NumericError):
            Trainer(tiny_model, quick_config).train_step(training_case, np.random.default_rng(0))


class TestFit:
    def test_writes_artifacts_and_log(self, tiny_model, training_case, quick_config, tmp_path):
        log = Trainer(tiny_model, quick_config).fit([training_case], [training_case], tmp_path)
        assert list(log.columns) == LOG_COLUMNS
        assert list(log["epoch"]) == [0, 1, 2]
        assert np.isnan(log.loc[0, "mse"]) and np.isfinite(log.loc[0, "val_psnr"])
        assert list(log["lr"]) == [1e-3, 1e-3, 1e-4]
        for name in (BEST_FILE, FINAL_FILE, STATE_FILE, LOG_FILE):
            assert (tmp_path / name).exists(), name
        on_disk = fileio.read_csv(tmp_path / LOG_FILE)
        assert list(on_disk["epoch"]) == [0, 1, 2]
        ReconModel.load(tmp_path / BEST_FILE)

    def test_resume_matches_uninterrupted_run(self, tiny_settings, training_case, quick_config, tmp_path):
        straight = ReconModel(tiny_settings)
        Trainer(straight, quick_config).fit([training_case], [], tmp_path / "straight")

        first = TrainConfig(**{**quick_config.__dict__, "epochs": 1})
        Trainer(ReconModel(tiny_settings), first).fit([training_case], [], tmp_path / "split")
        resumed = ReconModel(tiny_settings)
        trainer = Trainer(resumed, quick_config)
        log = trainer.fit([training_case], [], tmp_path / "split", resume=True)

        assert list(log["epoch"]) == [0, 1, 2]
        assert trainer.step == 2
        for (name, a), (_, b) in zip(straight.params.items(), resumed.params.items()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_resume_without_state(self, tiny_model, training_case, quick_config, tmp_path):
        with pytest.raises(DataError):
            Trainer(tiny_model, quick_config).fit([training_case], [], tmp_path, resume=True)

    def test_segmenter_stays_frozen(self, tiny_model, tiny_seg, training_case, tmp_path):
        tiny_seg.freeze()
        before = {name: t.data.tobytes() for name, t in tiny_seg.params.items()}
        cfg = TrainConfig(epochs=1, lr=1e-3, lam=0.5, dice_every=1, points_per_step=64, chunk=2048)
        log = Trainer(tiny_model, cfg, tiny_seg).fit([training_case], [], tmp_path)
        assert np.isfinite(log.loc[1, "dice_loss"])
        for name, tensor in tiny_seg.params.items():
            assert tensor.data.tobytes() == before[name], name
            assert tensor.grad is None, name

    def test_fresh_fit_replaces_stale_best(self, tiny_model, training_case, quick_config, tmp_path):
        stale = ReconModel(ReconSettings(detector_px=16, features=2, frequencies=2, width=8, blocks=1,
                                         unet_channels=(2, 4)))
        stale.save(tmp_path / BEST_FILE)
        Trainer(tiny_model, quick_config).fit([training_case], [], tmp_path)
        best = ReconModel.load(tmp_path / BEST_FILE)
        assert best.settings == tiny_model.settings
        for (name, a), (_, b) in zip(best.params.items(), tiny_model.params.items()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_needs_training_cases(self, tiny_model, quick_config):
        with pytest.raises(UsageError):
            Trainer(tiny_model, quick_config).fit([], [])

    def test_train_wrapper(self, tiny_model, training_case, quick_config):
        model, log = train([training_case], [], quick_config, model=tiny_model)
        assert model is tiny_model
        assert isinstance(log, pd.DataFrame) and len(log) == 3
        assert log["val_psnr"].isna().all()

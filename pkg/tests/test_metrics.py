"""Tests for PSNR, SSIM, hard Dice and the grouped summaries."""

import numpy as np
import pandas as pd
import pytest

from metrics import PSNR_CAP_DB, SSIM_K1, dice_columns, evaluate_case, hard_dice, psnr, ssim, summarize
from utils import UsageError
from volume import Volume, VolumeKind


class TestPsnr:
    def test_identical_is_capped(self, rng):
        x = rng.uniform(0, 1, size=(4, 4, 4))
        assert psnr(x, x) == PSNR_CAP_DB == 100.0

    def test_known_mse(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)
        assert psnr(a, b) == pytest.approx(20.0)

    def test_accepts_volumes(self):
        a = Volume(np.zeros((2, 2, 2)))
        b = Volume(np.ones((2, 2, 2)))
        assert psnr(a, b) == pytest.approx(0.0)

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_falls_as_noise_grows(self, rng):
        x = rng.uniform(0, 1, size=(8, 8, 8))
        noise = rng.normal(size=x.shape)
        scores = [psnr(x, x + amplitude * noise) for amplitude in (0.01, 0.05, 0.2)]
        assert scores[0] > scores[1] > scores[2]


class TestSsim:
    def test_identical_is_one(self, rng):
        x = rng.uniform(0, 1, size=(16, 16, 4))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_two_dimensional_input(self, rng):
        x = rng.uniform(0, 1, size=(16, 16))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_noise_lowers_score(self, rng):
        x = rng.uniform(0, 1, size=(16, 16, 2))
        noisy = np.clip(x + rng.normal(0, 0.3, size=x.shape), 0, 1)
        assert ssim(x, noisy) < 0.9

    def test_symmetric(self, rng):
        x, y = rng.uniform(0, 1, size=(2, 12, 12, 3))
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)

    def test_constant_images_closed_form(self):
        c1 = SSIM_K1 ** 2
        assert ssim(np.zeros((12, 12, 2)), np.ones((12, 12, 2))) == pytest.approx(c1 / (1.0 + c1), rel=1e-6)


class TestHardDice:
    @pytest.fixture
    def labels(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        a[:2] = 1
        return a

    def test_identical(self, labels):
        assert hard_dice(labels, labels, 1) == 1.0

    def test_disjoint(self, labels):
        assert hard_dice(labels, 1 - labels, 1) == 0.0

    def test_half_overlap(self, labels):
        other = np.zeros_like(labels)
        other[1:3] = 1
        assert hard_dice(labels, other, 1) == pytest.approx(0.5)

    def test_both_empty(self, labels):
        assert hard_dice(labels, labels, 4) == 1.0


class _OracleSeg:
    """Returns fixed labels regardless of input."""

    def __init__(self, labels):
        self.labels = labels

    def segment(self, hu):
        return Volume(self.labels, hu.spacing, VolumeKind.LABELS)


class _ThresholdSeg:
    """Labels everything denser than -500 HU as body."""

    def segment(self, hu):
        return Volume((hu.data > -500.0).astype(np.uint8), hu.spacing, VolumeKind.LABELS)


class TestEvaluateCase:
    def test_perfect_reconstruction(self, small_case):
        row = evaluate_case(small_case.hu, small_case, _OracleSeg(small_case.labels.data))
        assert row["psnr"] == 100.0
        assert row["ssim"] == pytest.approx(1.0, abs=1e-9)
        assert row["dice_mean"] == 1.0
        assert row["dice_body"] == 1.0

    def test_without_dice(self, small_case):
        row = evaluate_case(small_case.hu, small_case, with_dice=False)
        assert set(row) == {"psnr", "ssim"}

    def test_dice_needs_segmenter(self, small_case):
        with pytest.raises(UsageError):
            evaluate_case(small_case.hu, small_case)

    def test_absent_nodule_is_nan(self, make_case):
        labels = np.zeros((4, 4, 4), dtype=np.uint8)
        labels[1:3, 1:3, 1:3] = 1
        truth = make_case(np.where(labels > 0, 0.0, -1000.0), labels)
        row = evaluate_case(truth.hu, truth, _OracleSeg(labels))
        assert np.isnan(row["dice_nodule"])
        assert row["dice_mean"] == 1.0
        assert set(dice_columns()) <= set(row)

    def test_all_air_recon_scores_zero_dice(self, small_case):
        air = Volume(np.full(small_case.hu.shape, -1000.0), small_case.hu.spacing, VolumeKind.HU)
        row = evaluate_case(air, small_case, _ThresholdSeg())
        assert row["dice_mean"] == 0.0
        assert row["dice_body"] == 0.0
        assert row["psnr"] < PSNR_CAP_DB


class TestSummarize:
    def test_groups_and_statistics(self):
        frame = pd.DataFrame({
            "views": [1, 1, 2, 2],
            "lambda": [0.0, 0.0, 0.0, 0.0],
            "psnr": [20.0, 22.0, 30.0, 30.0],
        })
        summary = summarize(frame)
        assert list(summary["views"]) == [1, 2]
        first = summary.iloc[0]
        assert first["n"] == 2
        assert first["psnr_mean"] == pytest.approx(21.0)
        assert first["psnr_sd"] == pytest.approx(np.sqrt(2.0))
        assert first["psnr_ci95"] == pytest.approx(1.96 * np.sqrt(2.0) / np.sqrt(2.0))
        assert summary.iloc[1]["psnr_sd"] == 0.0

    def test_percent_error_text(self):
        frame = pd.DataFrame({"views": [2, 2], "percent_error": [1.0, 3.0]})
        summary = summarize(frame, by=["views"])
        assert summary.loc[0, "percent_error_text"] == "2.00 (1.41)"

    def test_single_value_has_no_spread(self):
        summary = summarize(pd.DataFrame({"psnr": [25.0]}), by=[])
        assert summary.loc[0, "psnr_mean"] == 25.0
        assert np.isnan(summary.loc[0, "psnr_sd"])

    def test_needs_a_metric(self):
        with pytest.raises(UsageError):
            summarize(pd.DataFrame({"views": [1]}))

"""Tests for shared helpers, the error hierarchy and volume conversions."""

import logging

import numpy as np
import pytest

from utils import (
    BadMagicError,
    DataError,
    NumericError,
    S2CTError,
    UsageError,
    case_name,
    configure_logging,
    format_float_list,
    parallel_map,
    parse_float_list,
    worker_count,
)
from volume import LabeledVolume, Volume, VolumeKind, hu_to_normalized, normalized_to_hu


class TestErrors:
    def test_exit_codes(self):
        assert S2CTError.exit_code == 1
        assert UsageError.exit_code == 2
        assert DataError.exit_code == 3
        assert NumericError.exit_code == 4

    def test_format_errors_are_data_errors(self):
        assert issubclass(BadMagicError, DataError)
        assert BadMagicError("x").exit_code == 3


class TestFloatLists:
    def test_parse(self):
        assert parse_float_list(" 0, 45,90 ,", "views") == [0.0, 45.0, 90.0]

    @pytest.mark.parametrize("text", ["", " , ", "0,ninety"])
    def test_parse_rejects(self, text):
        with pytest.raises(UsageError, match="views"):
            parse_float_list(text, "views")

    def test_format(self):
        assert format_float_list([0.0, 45.0, 0.1]) == "0,45,0.1"


class TestWorkers:
    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("S2CT_THREADS", "3")
        assert worker_count() == 3

    @pytest.mark.parametrize("raw", ["0", "many"])
    def test_bad_env(self, monkeypatch, raw):
        monkeypatch.setenv("S2CT_THREADS", raw)
        with pytest.raises(UsageError):
            worker_count()

    def test_default_is_positive(self, monkeypatch):
        monkeypatch.delenv("S2CT_THREADS", raising=False)
        assert worker_count() >= 1

    def test_parallel_map_keeps_order(self):
        assert parallel_map(lambda x: x * x, range(20), workers=4) == [x * x for x in range(20)]
        assert parallel_map(lambda x: x + 1, [1], workers=4) == [2]


class TestLogging:
    def test_verbose_sets_debug(self):
        configure_logging(verbose=True)
        assert logging.getLogger().level == logging.DEBUG
        configure_logging()
        assert logging.getLogger().level == logging.INFO


def test_case_name():
    assert case_name(7) == "case_0007"


class TestVolume:
    def test_dtypes_follow_kind(self):
        assert Volume(np.zeros((2, 2, 2))).data.dtype == np.float32
        assert Volume(np.zeros((2, 2, 2)), kind=VolumeKind.LABELS).data.dtype == np.uint8

    def test_needs_three_dimensions(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2)))

    def test_extent(self):
        assert Volume(np.zeros((4, 2, 2)), (2.0, 1.0, 3.0)).extent_mm == (8.0, 2.0, 6.0)

    def test_labeled_shapes_must_match(self):
        with pytest.raises(ValueError):
            LabeledVolume(Volume(np.zeros((2, 2, 2))), Volume(np.zeros((2, 2, 3)), kind=VolumeKind.LABELS))

    def test_normalization(self):
        hu = np.array([-2000.0, -1000.0, 0.0, 1000.0, 3000.0])
        np.testing.assert_allclose(hu_to_normalized(hu), [0.0, 0.0, 0.5, 1.0, 1.0])
        np.testing.assert_allclose(normalized_to_hu(np.array([0.0, 0.5, 1.0])), [-1000.0, 0.0, 1000.0])

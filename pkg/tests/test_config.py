"""Tests for the key=value run configuration."""

from pathlib import Path

import pytest

from config import RunConfig, load_config
from geometry import Beam
from utils import UsageError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class TestParsing:
    def test_defaults_round_trip_through_text(self):
        cfg = RunConfig()
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_comments_blanks_and_aliases(self):
        cfg = RunConfig.from_text("""
            # desk run
            dim = 16      # small
            lambda=0, 0.1
            eval_views=1,2
            figures=off
        """)
        assert cfg.dim == 16
        assert cfg.lambdas == [0.0, 0.1]
        assert cfg.eval_views == [1, 2] and isinstance(cfg.eval_views[0], int)
        assert cfg.figures is False

    def test_field_name_of_aliased_key_rejected(self):
        with pytest.raises(UsageError, match="lambdas"):
            RunConfig.from_text("lambdas=0.1")

    def test_unknown_key(self):
        with pytest.raises(UsageError, match="dropout"):
            RunConfig.from_text("dropout=0.5")

    def test_line_without_equals(self):
        with pytest.raises(UsageError, match=":2:"):
            RunConfig.from_text("dim=16\nepochs 3\n")

    @pytest.mark.parametrize("text", ["epochs=ten", "figures=maybe", "eval_views=1.5", "views=a,b", "spacing=x"])
    def test_bad_values(self, text):
        with pytest.raises(UsageError):
            RunConfig.from_text(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError):
            RunConfig.from_file(tmp_path / "absent.cfg")

    def test_overrides_on_top_of_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs=5\nseed=3\n")
        cfg = load_config(path, {"epochs": "7"})
        assert (cfg.epochs, cfg.seed) == (7, 3)
        assert load_config().epochs == 100

    @pytest.mark.parametrize("name", ["desk.cfg", "smoke.cfg"])
    def test_shipped_configs_load(self, name):
        cfg = RunConfig.from_file(CONFIG_DIR / name)
        assert set(cfg.eval_views) <= {1, 2, 4}


class TestValidation:
    @pytest.mark.parametrize("overrides", [
        {"dim": "15"},
        {"dim": "8"},
        {"spacing": "0"},
        {"n_val": "0"},
        {"eval_views": "3,5"},
        {"lambda": "-0.1"},
        {"epochs": "0"},
        {"lr_drop_epoch": "200"},
        {"step_vox": "2"},
        {"detector_px": "18"},
        {"beam": "helical"},
    ])
    def test_rejected(self, overrides):
        with pytest.raises(UsageError):
            RunConfig().with_overrides(overrides)

    def test_eval_views_need_rendered_angles(self):
        with pytest.raises(UsageError, match="45"):
            RunConfig().with_overrides({"views": "0,90", "eval_views": "4"})


class TestDerived:
    def test_drop_epoch_defaults_to_half(self):
        assert RunConfig().drop_epoch == 51
        assert RunConfig(epochs=1).drop_epoch == 1
        assert RunConfig(lr_drop_epoch=10).drop_epoch == 10

    def test_split_is_consecutive(self):
        split = RunConfig(n_train=3, n_val=1, n_test=2).split()
        assert split == {"train": [0, 1, 2], "val": [3], "test": [4, 5]}

    def test_geometry(self):
        g = RunConfig(beam="fan", detector_px=16).geometry(45.0)
        assert g.beam is Beam.CONE
        assert g.theta_deg == 45.0 and g.detector_px == 16

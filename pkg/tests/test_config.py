"""Tests for TOML experiment configuration."""

import pytest

from patchlab.config import (
    ConfigError,
    DEFAULTS,
    apply_overrides,
    attack_spec_from,
    detector_configs_from,
    dump_config,
    eval_config_from,
    load_config,
    phys_from,
    train_config_from,
)
from patchlab.core import AdvMode, AttackType, InitMode


class TestDefaults:
    def test_key_defaults(self):
        assert DEFAULTS["data"]["image_size"] == 256
        assert DEFAULTS["train"]["epochs"] == 200
        assert DEFAULTS["train"]["lr"] == 0.03
        assert DEFAULTS["attack"]["type"] == "hiding"
        assert DEFAULTS["attack"]["weights"] == {"adv": 3.0, "tv": 1.0, "nps": 1.0, "his": 0.0}
        assert DEFAULTS["blackbox"]["budget"] == 0

    def test_load_without_file_copies_defaults(self):
        cfg = load_config(None)
        assert cfg == DEFAULTS
        cfg["train"]["epochs"] = 1
        cfg["data"]["counts"]["train"] = 1
        assert DEFAULTS["train"]["epochs"] == 200
        assert DEFAULTS["data"]["counts"]["train"] == 800


class TestLoadConfig:
    def test_merges_file_over_defaults(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text(
            '[attack]\ntype = "creating"\ntarget_class = 3\n'
            "[train]\nepochs = 12\n"
            "[data.counts]\ntrain = 10\n"
        )
        cfg = load_config(path)
        assert cfg["attack"]["type"] == "creating"
        assert cfg["attack"]["target_class"] == 3
        assert cfg["train"]["epochs"] == 12
        assert cfg["train"]["lr"] == 0.03  # untouched default
        assert cfg["data"]["counts"] == {"train": 10, "val": 100, "test": 100}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(tmp_path / "nope.toml")

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("epochs = = 3\n")
        with pytest.raises(ConfigError, match="bad.toml"):
            load_config(path)

    def test_unknown_top_level_key(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text("[nope]\nx = 1\n")
        with pytest.raises(ConfigError, match="top level.*valid keys"):
            load_config(path)

    def test_unknown_nested_key(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text("[train]\nnope = 1\n")
        with pytest.raises(ConfigError, match="unknown config key 'nope' at train"):
            load_config(path)

    def test_scalar_where_section_expected(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text("train = 3\n")
        with pytest.raises(ConfigError, match="must be a section"):
            load_config(path)

    @pytest.mark.parametrize(
        "line, message",
        [
            ('[train]\nepochs = "many"', "expects a number"),
            ("[data]\nroot = 5", "expects a string"),
            ("[train]\napply_phys = 1", "expects a boolean"),
            ("[detector]\nwidths = 8", "expects a list"),
            ('[attack]\ntarget_class = "cat"', "expects int"),
        ],
    )
    def test_type_mismatches(self, tmp_path, line, message):
        path = tmp_path / "exp.toml"
        path.write_text(line + "\n")
        with pytest.raises(ConfigError, match=message):
            load_config(path)

    def test_bool_not_accepted_as_number(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text("[train]\nepochs = true\n")
        with pytest.raises(ConfigError, match="expects a number"):
            load_config(path)

    def test_overrides_applied_after_file(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text("[train]\nepochs = 12\n")
        cfg = load_config(path, overrides=["train.epochs=5"])
        assert cfg["train"]["epochs"] == 5


class TestApplyOverrides:
    def test_parses_toml_literals(self):
        cfg = apply_overrides(
            load_config(None),
            [
                "train.epochs=10",
                "train.lr=0.5",
                "train.apply_phys=false",
                "detector.widths=[4, 8]",
                'attack.type="creating"',
                "data.counts.train=5",
            ],
        )
        assert cfg["train"]["epochs"] == 10
        assert cfg["train"]["lr"] == 0.5
        assert cfg["train"]["apply_phys"] is False
        assert cfg["detector"]["widths"] == [4, 8]
        assert cfg["attack"]["type"] == "creating"
        assert cfg["data"]["counts"]["train"] == 5

    def test_bare_string_accepted(self):
        cfg = apply_overrides(load_config(None), ["attack.type=creating"])
        assert cfg["attack"]["type"] == "creating"

    def test_original_not_mutated(self):
        base = load_config(None)
        apply_overrides(base, ["train.epochs=1"])
        assert base["train"]["epochs"] == 200

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="must look like section.key=value"):
            apply_overrides(load_config(None), ["train.epochs"])

    def test_undotted_key(self):
        with pytest.raises(ConfigError, match="dotted path"):
            apply_overrides(load_config(None), ["epochs=10"])

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown config section 'nope'"):
            apply_overrides(load_config(None), ["nope.epochs=3"])

    def test_unknown_leaf(self):
        with pytest.raises(ConfigError, match="unknown config key 'nope'"):
            apply_overrides(load_config(None), ["train.nope=3"])

    def test_type_checked(self):
        with pytest.raises(ConfigError, match="expects a number"):
            apply_overrides(load_config(None), ['train.epochs="x"'])


class TestDumpConfig:
    def test_renders_sections_and_unset_keys(self):
        text = dump_config()
        assert "[data]" in text
        assert 'root = "data/synth"' in text
        assert "# target_class = <unset>" in text
        assert "[detector.train]" in text
        assert "[train.phys]" in text
        assert "contrast = [0.8, 1.2]" in text
        assert text.endswith("\n")

    def test_round_trips_through_loader(self, tmp_path):
        path = tmp_path / "dumped.toml"
        path.write_text(dump_config())
        assert load_config(path) == load_config(None)


class TestBuilders:
    def test_attack_spec_defaults(self):
        spec = attack_spec_from(load_config(None))
        assert spec.attack_type is AttackType.HIDING
        assert spec.target_class is None
        assert spec.adv_mode is AdvMode.BOTH
        assert spec.init_mode is InitMode.GRAY
        assert (spec.weights.adv, spec.weights.tv) == (3.0, 1.0)

    def test_attack_spec_bad_enum(self):
        cfg = apply_overrides(load_config(None), ["attack.type=explode"])
        with pytest.raises(ConfigError, match="explode"):
            attack_spec_from(cfg)

    def test_attack_spec_missing_target(self):
        cfg = apply_overrides(load_config(None), ["attack.type=creating"])
        with pytest.raises(ConfigError, match="target"):
            attack_spec_from(cfg)

    def test_phys_ranges(self):
        phys = phys_from(load_config(None))
        assert (phys.c_lo, phys.c_hi) == (0.8, 1.2)
        assert (phys.b_lo, phys.b_hi) == (-0.1, 0.1)
        assert phys.noise_amp == 0.1

    def test_train_config_defaults(self):
        tc = train_config_from(load_config(None), checkpoint_dir="ckpt")
        assert tc.patch_side == 64
        assert tc.epochs == 200
        assert tc.lr == 0.03
        assert tc.train_images is None  # 0 means "all"
        assert tc.val_images is None
        assert tc.checkpoint_dir == "ckpt"
        assert tc.conf_thresh == 0.25

    def test_train_config_zero_to_none(self):
        cfg = apply_overrides(load_config(None), ["train.train_images=16"])
        assert train_config_from(cfg).train_images == 16

    def test_train_config_invalid_wrapped(self):
        cfg = apply_overrides(load_config(None), ["train.lr=-1.0"])
        with pytest.raises(ConfigError):
            train_config_from(cfg)

    def test_eval_config(self):
        ec = eval_config_from(load_config(None))
        assert ec.max_images is None
        assert ec.batch_size == 8
        cfg = apply_overrides(load_config(None), ["eval.max_images=5"])
        assert eval_config_from(cfg).max_images == 5

    def test_detector_configs(self):
        det_cfg, train_cfg = detector_configs_from(load_config(None))
        assert det_cfg.num_classes == 8
        assert det_cfg.image_size == 256
        assert det_cfg.widths == (8, 16, 32, 48, 64, 80)
        assert train_cfg.epochs == 24
        assert train_cfg.label_smoothing == 0.1
        assert train_cfg.augment_occlusion is False
        assert train_cfg.lambda_box == 5.0

    def test_detector_configs_shape_params_win(self):
        det_cfg, _ = detector_configs_from(load_config(None), num_classes=4, image_size=128)
        assert det_cfg.num_classes == 4
        assert det_cfg.image_size == 128

    def test_detector_configs_invalid_wrapped(self):
        cfg = apply_overrides(load_config(None), ["detector.widths=[]"])
        with pytest.raises(ConfigError):
            detector_configs_from(cfg)

"""
小型分類モデル（構成・パラメータ配置・順伝播）と合成データセットのテスト。
"""

from __future__ import annotations

import numpy as np
import pytest

from src.core.exceptions import ModelConfigError, UnknownPresetError, UnknownVariantError
from src.model.dataset import CLASS_NAMES, NUM_CLASSES, SyntheticDataset
from src.model.network import ModelConfig, StageConfig, build_model, param_specs, swin_t_config, tiny_config


def _single_stage(**stage_kwargs) -> ModelConfig:
    stage = StageConfig(blocks=1, channels=8, heads=2, **stage_kwargs)
    return ModelConfig(stages=[stage], image_size=16, patch_size=4, num_classes=NUM_CLASSES)


class TestModelConfig:
    """構成の検証とhead_setting。"""

    def test_tiny_config_is_valid(self):
        cfg = tiny_config("ELSA")
        cfg.validate()
        assert [stage.channels for stage in cfg.stages] == [16, 32]
        assert cfg.stage_resolution(1) == 4

    @pytest.mark.parametrize("setting,expected", [("One", [1, 1]), ("OneX", [2, 4]), ("TwoX", [4, 8]), ("C", [16, 32])])
    def test_head_settings(self, setting, expected):
        cfg = tiny_config("DwConv", head_setting=setting)
        assert [stage.heads for stage in cfg.resolved_stages()] == expected

    def test_unknown_head_setting(self):
        with pytest.raises(ModelConfigError):
            tiny_config(head_setting="Half").validate()

    def test_heads_must_divide_channels(self):
        cfg = ModelConfig(stages=[StageConfig(blocks=1, channels=6, heads=4, mixer="DwConv", window_or_kernel=3)])
        with pytest.raises(ModelConfigError):
            cfg.validate()

    def test_window_must_divide_resolution(self):
        with pytest.raises(ModelConfigError):
            _single_stage(mixer="LSA", window_or_kernel=3).validate()

    def test_even_kernel_rejected(self):
        with pytest.raises(ModelConfigError):
            _single_stage(mixer="ELSA", window_or_kernel=4).validate()

    def test_unknown_mixer(self):
        with pytest.raises(ModelConfigError):
            _single_stage(mixer="Conv").validate()

    def test_unknown_preset(self):
        with pytest.raises(UnknownPresetError):
            _single_stage(mixer="Unified", preset="Net99", window_or_kernel=3).validate()

    def test_unknown_variant(self):
        with pytest.raises(UnknownVariantError):
            _single_stage(mixer="ELSA", window_or_kernel=3, variant="Fastest").validate()

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ModelConfigError):
            ModelConfig.from_dict({"stages": [{"blocks": 1, "channels": 8, "heads": 2, "depth": 3}]})
        with pytest.raises(ModelConfigError):
            ModelConfig.from_dict({"stages": [], "width": 3})

    def test_from_dict_round_trip(self):
        cfg = tiny_config("ELSA", lam=0.5)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_swin_layout(self):
        with pytest.raises(KeyError):
            swin_t_config("SwinB")


class TestForward:
    """順伝播の形状とパラメータ数。"""

    @pytest.mark.parametrize("mixer", ["LSA", "DwConv", "ELSA"])
    def test_logits_shape(self, mixer):
        model = build_model(tiny_config(mixer), seed=0)
        images = np.zeros((2, 3, 32, 32), dtype=np.float32)

        logits = model.forward(images)

        assert logits.shape == (2, NUM_CLASSES)
        assert np.all(np.isfinite(logits))

    @pytest.mark.parametrize("preset,size", [("Net7N", 3), ("Net7", 4), ("DwConv", 3)])
    def test_unified_mixer(self, preset, size):
        cfg = _single_stage(mixer="Unified", preset=preset, window_or_kernel=size)
        model = build_model(cfg, seed=1, dtype="f64")

        logits = model.forward(np.ones((1, 3, 16, 16)))

        assert logits.shape == (1, NUM_CLASSES)

    def test_block_boundaries_keep_shape(self):
        model = build_model(tiny_config("ELSA"), seed=0)
        trace = []
        model.forward(np.zeros((3, 3, 32, 32), dtype=np.float32), trace=trace)

        assert trace == [("stages.0.blocks.0", (3, 16, 8, 8)), ("stages.1.blocks.0", (3, 32, 4, 4))]

    def test_param_count_matches_specs(self):
        cfg = tiny_config("ELSA")
        model = build_model(cfg, seed=0)
        specs = param_specs(cfg)

        assert list(model.params) == list(specs)
        assert model.param_count == sum(spec.size for spec in specs.values())
        assert all(model.params[name].shape == spec.shape for name, spec in specs.items())

    def test_ghost_adds_two_matrices_per_block(self):
        with_ghost = build_model(tiny_config("ELSA"), seed=0)
        without = build_model(tiny_config("ELSA", ghost=False), seed=0)
        # 2ブロック × (O, S) × C·K²
        assert with_ghost.param_count - without.param_count == 2 * (16 * 9 + 32 * 9)

    def test_init_is_deterministic(self):
        a = build_model(tiny_config("LSA"), seed=5)
        b = build_model(tiny_config("LSA"), seed=5)
        c = build_model(tiny_config("LSA"), seed=6)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        assert not np.array_equal(a.params["head.weight"], c.params["head.weight"])

    def test_elsa_and_lsa_differ_only_in_mixer_parameters(self):
        elsa_model = build_model(tiny_config("ELSA"), seed=0)
        lsa_model = build_model(tiny_config("LSA"), seed=0)
        elsa_mixer, lsa_mixer = set(elsa_model.mixer_param_names()), set(lsa_model.mixer_param_names())

        assert elsa_mixer and lsa_mixer
        assert set(elsa_model.params) ^ set(lsa_model.params) <= elsa_mixer | lsa_mixer
        shared = {name: value.shape for name, value in elsa_model.params.items() if name not in elsa_mixer}
        assert shared == {name: value.shape for name, value in lsa_model.params.items() if name not in lsa_mixer}
        assert "stages.0.blocks.0.mixer.ghost_O" in elsa_mixer

    @pytest.mark.parametrize("mixer", ["LSA", "DwConv", "ELSA"])
    def test_forward_is_bitwise_repeatable(self, mixer, rng):
        model = build_model(tiny_config(mixer), seed=3)
        images = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)

        np.testing.assert_array_equal(model.forward(images), model.forward(images))

    def test_input_shape_checked(self):
        model = build_model(tiny_config("DwConv"), seed=0)
        with pytest.raises(ModelConfigError):
            model.forward(np.zeros((1, 3, 16, 16), dtype=np.float32))

    def test_dtype_follows_request(self):
        model = build_model(tiny_config("DwConv"), seed=0, dtype="f64")
        assert model.dtype == np.float64


class TestSyntheticDataset:
    """合成データセット。"""

    def test_shapes_and_balance(self):
        data = SyntheticDataset(seed=0, n=40)

        assert data.images.shape == (40, 3, 32, 32)
        assert data.images.dtype == np.float32
        assert len(data) == 40
        np.testing.assert_array_equal(data.class_counts(), np.full(NUM_CLASSES, 4))
        assert len(CLASS_NAMES) == NUM_CLASSES

    def test_deterministic_per_seed(self):
        a = SyntheticDataset(seed=3, n=12, image_size=16)
        b = SyntheticDataset(seed=3, n=12, image_size=16)
        c = SyntheticDataset(seed=4, n=12, image_size=16)

        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, c.images)

    def test_noise_free_images_have_two_colors_per_channel(self):
        data = SyntheticDataset(seed=0, n=10, noise=0.0, dtype="f64")
        for image in data.images:
            assert all(len(np.unique(channel)) <= 2 for channel in image)

    def test_batches_cover_everything(self):
        data = SyntheticDataset(seed=0, n=7, image_size=8)
        sizes = [images.shape[0] for images, _ in data.iter_batches(3)]
        assert sizes == [3, 3, 1]

    def test_batch_selects_indices(self):
        data = SyntheticDataset(seed=0, n=10, image_size=8)
        images, labels = data.batch(np.array([2, 5]))
        np.testing.assert_array_equal(images[1], data.images[5])
        assert labels.tolist() == [data.labels[2], data.labels[5]]

    def test_rejects_empty(self):
        with pytest.raises(ModelConfigError):
            SyntheticDataset(seed=0, n=0)

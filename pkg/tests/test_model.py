import numpy as np
import pytest

from dispersionlab.errors import ConfigurationError
from dispersionlab.model import (
    ModelConfig,
    SyntheticTask,
    forward,
    forward_with_capture,
    init_params,
    load_checkpoint,
    make_dataset,
    parameter_count,
    parameter_shapes,
    receptive_field_grid,
    receptive_field_probe,
    save_checkpoint,
    stage_grids,
    train_toy,
    zero_lepe,
)
from dispersionlab.rng import rng_for


def single_block_config(**overrides):
    base = dict(stage_dims=(8,), stage_depths=(1,), stage_heads=(1,), window=2,
                patch_size=4, num_classes=2, image_size=32, head_mode="first_token")
    base.update(overrides)
    return ModelConfig(**base)


class TestConfigAndShapes:
    def test_tiny_224_stage_grids(self):
        cfg = ModelConfig.tiny_224()
        assert stage_grids(cfg) == [56, 28, 14, 7]

    def test_tiny_224_parameter_count_band(self):
        count = parameter_count(ModelConfig.tiny_224())
        assert 18_000_000 <= count <= 34_000_000

    def test_toy_config_logit_shape(self):
        cfg = ModelConfig.toy(num_classes=5)
        params = init_params(cfg)
        images = rng_for(0, "imgs").standard_normal((2, 64, 64, 3))
        assert forward(cfg, params, images).shape == (2, 5)

    def test_indivisible_resolution_names_stage(self):
        cfg = ModelConfig.toy()
        with pytest.raises(ConfigurationError, match="stem"):
            stage_grids(cfg, image_size=30)

    def test_head_divisibility_validated(self):
        with pytest.raises(ConfigurationError, match="divisible"):
            ModelConfig(stage_dims=(10,), stage_depths=(1,), stage_heads=(3,),
                        window=2, image_size=32)

    def test_zero_depth_counts_stem_and_head_only(self):
        cfg = ModelConfig(stage_dims=(8,), stage_depths=(0,), stage_heads=(1,),
                          window=2, patch_size=4, num_classes=3, image_size=32)
        shapes = parameter_shapes(cfg)
        assert all(name.startswith(("stem.", "head.")) for name in shapes)
        expected = (48 * 8 + 8) + (8 + 8) + (8 + 8) + (8 * 3 + 3)
        assert parameter_count(cfg) == expected

    def test_doubling_dims_roughly_quadruples_block_params(self):
        small = ModelConfig(stage_dims=(16,), stage_depths=(1,), stage_heads=(1,),
                            window=2, patch_size=4, image_size=32)
        big = ModelConfig(stage_dims=(32,), stage_depths=(1,), stage_heads=(1,),
                          window=2, patch_size=4, image_size=32)

        def block_params(cfg):
            return sum(int(np.prod(s)) for n, s in parameter_shapes(cfg).items()
                       if n.startswith("s0.") and not n.endswith(".b")
                       and "norm" not in n and "lepe" not in n)

        ratio = block_params(big) / block_params(small)
        assert 3.8 <= ratio <= 4.2

    def test_config_json_round_trip(self):
        cfg = ModelConfig.toy(attention_variant="linear", averaging_enabled=False)
        assert ModelConfig.from_json(cfg.to_json()) == cfg


class TestForward:
    def test_deterministic_bitwise(self):
        cfg = single_block_config()
        params = init_params(cfg)
        images = rng_for(1, "det").standard_normal((3, 32, 32, 3))
        a = forward(cfg, params, images).array
        b = forward(cfg, params, images).array
        assert np.array_equal(a, b)

    def test_averaging_toggle_shifts_attention_by_value_mean(self):
        cfg_on = single_block_config(averaging_enabled=True)
        cfg_off = single_block_config(averaging_enabled=False)
        params = init_params(cfg_on)
        images = rng_for(2, "toggle").standard_normal((2, 32, 32, 3))
        _, cap_on = forward_with_capture(cfg_on, params, images)
        _, cap_off = forward_with_capture(cfg_off, params, images)
        for block_on, block_off in zip(cap_on, cap_off):
            v = block_off["v"]
            n = block_off["tokens"]
            mix = np.concatenate([
                np.tile(v[s : s + n].mean(axis=0), (n, 1))
                for s in range(0, v.shape[0], n)
            ])
            rebuilt = block_off["attn_out"] + mix
            assert np.array_equal(block_on["attn_out"], rebuilt)

    def test_attention_variants_run(self):
        images = rng_for(3, "variants").standard_normal((2, 32, 32, 3))
        for variant in ("window", "linear", "full"):
            cfg = single_block_config(attention_variant=variant)
            out = forward(cfg, init_params(cfg), images).array
            assert out.shape == (2, 2) and np.isfinite(out).all()

    def test_multi_stage_multi_head_runs(self):
        cfg = ModelConfig(stage_dims=(8, 16), stage_depths=(1, 1), stage_heads=(1, 2),
                          window=2, patch_size=4, num_classes=4, image_size=32)
        images = rng_for(4, "ms").standard_normal((2, 32, 32, 3))
        out = forward(cfg, init_params(cfg), images).array
        assert out.shape == (2, 4) and np.isfinite(out).all()

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = single_block_config()
        params = init_params(cfg)
        stem = str(tmp_path / "ckpt")
        save_checkpoint(params, stem)
        back = load_checkpoint(stem)
        assert sorted(back) == sorted(params)
        for name in params:
            np.testing.assert_array_equal(back[name], params[name])


class TestReceptiveField:
    def test_diagonal_always_nonzero(self):
        cfg = single_block_config(averaging_enabled=False)
        params = zero_lepe(init_params(cfg))
        assert receptive_field_probe(cfg, params, 5, 5) > 0

    def test_averaging_connects_everything(self):
        cfg = single_block_config(averaging_enabled=True)
        params = init_params(cfg)
        grid = receptive_field_grid(cfg, params, 9)
        assert (grid > 0).all()

    def test_cross_window_zero_without_averaging_and_lepe(self):
        cfg = single_block_config(averaging_enabled=False)
        params = zero_lepe(init_params(cfg))
        grid = receptive_field_grid(cfg, params, 0).reshape(8, 8)
        window = np.zeros((8, 8), dtype=bool)
        window[:2, :2] = True
        assert (grid[window] > 0).all()
        assert (grid[~window] == 0).all()

    def test_lepe_extends_one_ring_beyond_window(self):
        cfg = single_block_config(averaging_enabled=False)
        params = init_params(cfg)  # lepe active
        # token (1,1): window is rows/cols 0..1, its 3x3 ring reaches index 2
        grid = receptive_field_grid(cfg, params, 9).reshape(8, 8)
        assert grid[0, 2] > 0 and grid[2, 0] > 0 and grid[2, 2] > 0
        assert grid[0, 3] == 0 and grid[3, 3] == 0
        # the corner token's ring is clipped inside its own window
        corner = receptive_field_grid(cfg, params, 0).reshape(8, 8)
        assert corner[0, 2] == 0 and corner[2, 0] == 0


class TestToyTask:
    def test_corner_window_is_balanced(self):
        task = SyntheticTask()
        images, labels = make_dataset(task, 4, 16, rng_for(5, "ds"))
        for s in range(16):
            corner = images[s, :8, :8]  # 2x2 cells of 4x4 pixels each
            red = (corner[..., 0] > 0.5).sum()
            green = (corner[..., 1] > 0.5).sum()
            assert red == green

    def test_labels_match_global_majority(self):
        task = SyntheticTask()
        images, labels = make_dataset(task, 4, 16, rng_for(6, "ds2"))
        for s in range(16):
            cells = images[s, ::4, ::4]  # one pixel per cell
            red = (cells[..., 0] > 0.5).sum()
            green = (cells[..., 1] > 0.5).sum()
            majority = 0 if red > green else 1
            assert labels[s] == majority

    def test_zero_epochs_is_chance_level(self):
        cfg = single_block_config()
        result = train_toy(cfg, SyntheticTask(), epochs=0, seed=13)
        assert len(result.val_acc) == 1
        assert 0.3 <= result.val_acc[0] <= 0.7

    def test_short_training_reduces_loss(self):
        cfg = single_block_config()
        result = train_toy(cfg, SyntheticTask(), epochs=4, seed=13)
        assert result.loss[-1] < 0.72  # below-chance cross entropy after 4 epochs
        assert len(result.val_acc) == 5

    def test_mismatched_task_rejected(self):
        cfg = single_block_config(num_classes=3)
        with pytest.raises(ConfigurationError):
            train_toy(cfg, SyntheticTask(), epochs=1, seed=0)

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from drnet.blocks import (
    AdaptiveAggregation,
    AggregationSpec,
    Compression,
    DoubleResidualBlock,
    DropBlock2d,
    DropBlockConfig,
    Resample,
    dropblock_apply,
    dropblock_gamma,
    dropblock_keep_mask,
)
from drnet.errors import ConfigError, NumericError, ShapeError
from helpers import fd_gradcheck, is_union_of_squares, jitter_parameters


class TestDropblockGamma:
    def test_keep_prob_one_is_zero(self):
        assert dropblock_gamma(1.0, 7, 64, 64) == 0.0

    def test_block_one_degenerates_to_unit_rate(self):
        assert dropblock_gamma(0.9, 1, 32, 32) == pytest.approx(0.1, abs=1e-12)

    def test_paper_defaults_on_64(self):
        # (0.14 / 49) * (4096 / 3364), evaluated independently.
        assert dropblock_gamma(0.86, 7, 64, 64) == pytest.approx(0.0034788517, abs=1e-9)

    def test_gamma_below_one(self):
        for bs in (1, 3, 7, 8):
            g = dropblock_gamma(0.01, bs, 8, 8)
            assert 0.0 <= g < 1.0

    def test_block_larger_than_features_rejected(self):
        with pytest.raises(ConfigError):
            dropblock_gamma(0.9, 9, 8, 16)

    @pytest.mark.parametrize("keep", [0.0, -0.1, 1.5])
    def test_bad_keep_prob_rejected(self, keep):
        with pytest.raises(ConfigError):
            dropblock_gamma(keep, 7, 64, 64)

    def test_bad_block_size_rejected(self):
        with pytest.raises(ConfigError):
            dropblock_gamma(0.9, 0, 64, 64)


class TestDropblockApply:
    def test_inference_is_bit_exact_identity(self):
        rng = np.random.default_rng(0)
        x = rng.random((3, 16, 20)).astype(np.float32)
        cfg = DropBlockConfig(block_size=5, keep_prob=0.5, training=False)
        out = dropblock_apply(x, cfg, rng_seed=123)
        assert np.array_equal(out, x)

    def test_keep_prob_one_is_identity(self):
        rng = np.random.default_rng(1)
        x = rng.random((2, 12, 12)).astype(np.float32)
        out = dropblock_apply(x, DropBlockConfig(3, 1.0, training=True), rng_seed=5)
        assert np.array_equal(out, x)

    def test_non_finite_input_rejected(self):
        x = np.full((1, 8, 8), np.nan, dtype=np.float32)
        with pytest.raises(NumericError):
            dropblock_apply(x, DropBlockConfig(3, 0.9, training=True), rng_seed=0)

    def test_invalid_config_rejected(self):
        x = np.ones((1, 8, 8), dtype=np.float32)
        with pytest.raises(ConfigError):
            dropblock_apply(x, DropBlockConfig(9, 0.9, training=True), rng_seed=0)

    def test_bad_rank_rejected(self):
        with pytest.raises(ShapeError):
            dropblock_apply(np.ones((8, 8), dtype=np.float32),
                            DropBlockConfig(3, 0.9), rng_seed=0)

    def test_seeded_determinism(self):
        x = np.ones((4, 32, 32), dtype=np.float32)
        cfg = DropBlockConfig(7, 0.86, training=True)
        a = dropblock_apply(x, cfg, rng_seed=7)
        b = dropblock_apply(x, cfg, rng_seed=7)
        c = dropblock_apply(x, cfg, rng_seed=8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_mean_dropped_fraction_converges(self):
        # >= 1000 independent masks (channels x seeds), 32x32, block 7, keep 0.86.
        cfg = DropBlockConfig(7, 0.86, training=True)
        ones = np.ones((125, 32, 32), dtype=np.float32)
        dropped = []
        for seed in range(8):
            out = dropblock_apply(ones, cfg, rng_seed=seed)
            dropped.append((out == 0).mean())
        assert abs(float(np.mean(dropped)) - 0.14) <= 0.02

    def test_dropped_regions_are_squares(self):
        cfg = DropBlockConfig(7, 0.86, training=True)
        ones = np.ones((40, 32, 32), dtype=np.float32)
        out = dropblock_apply(ones, cfg, rng_seed=21)
        saw_drop = False
        for ch in range(out.shape[0]):
            dropped = out[ch] == 0
            saw_drop = saw_drop or bool(dropped.any())
            assert is_union_of_squares(dropped, 7)
        assert saw_drop

    def test_blocks_never_cross_boundary(self):
        # Seeds only fall where a full block fits, so a one-pixel border
        # region can only be dropped together with its interior square.
        cfg = DropBlockConfig(5, 0.5, training=True)
        ones = np.ones((64, 16, 16), dtype=np.float32)
        out = dropblock_apply(ones, cfg, rng_seed=2)
        for ch in range(out.shape[0]):
            assert is_union_of_squares(out[ch] == 0, 5)

    def test_survivor_rescale_preserves_sum(self):
        ones = np.ones((8, 32, 32), dtype=np.float32)
        out = dropblock_apply(ones, DropBlockConfig(7, 0.86, training=True), rng_seed=3)
        assert out.sum() == pytest.approx(ones.sum(), rel=1e-4)

    def test_block_one_matches_unit_dropout_chi_square(self):
        from scipy import stats

        cfg = DropBlockConfig(1, 0.9, training=True)
        trials = 3000
        ones = np.ones((trials, 16, 16), dtype=np.float32)
        dropped = dropblock_apply(ones, cfg, rng_seed=11) == 0
        counts = dropped.sum(axis=0)  # per-cell drop counts over trials
        p = 0.1
        z_sq = ((counts - trials * p) ** 2) / (trials * p * (1 - p))
        stat = float(z_sq.sum())
        dof = counts.size
        lo, hi = stats.chi2.ppf([1e-9, 1 - 1e-9], dof)
        assert lo < stat < hi
        assert abs(dropped.mean() - 0.1) < 0.01

    def test_torch_tensor_roundtrip(self):
        x = torch.rand(2, 3, 12, 12)
        out = dropblock_apply(x, DropBlockConfig(3, 0.8, training=True), rng_seed=4)
        assert isinstance(out, torch.Tensor)
        assert out.shape == x.shape

    def test_keep_mask_debug_image(self):
        mask = dropblock_keep_mask(32, 32, DropBlockConfig(7, 0.7, training=True), rng_seed=1)
        assert mask.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 255}


class TestDropBlockModule:
    def test_eval_mode_identity(self):
        layer = DropBlock2d(5, 0.7).eval()
        x = torch.rand(2, 4, 16, 16)
        assert torch.equal(layer(x), x)

    def test_training_drops_with_generator(self):
        layer = DropBlock2d(5, 0.5).train()
        layer.generator = torch.Generator().manual_seed(0)
        x = torch.ones(1, 8, 32, 32)
        out = layer(x)
        assert (out == 0).any()


class TestDoubleResidualBlock:
    def test_identity_with_zero_branch_weights(self):
        # Residual-branch weights zeroed, normalization at its passthrough
        # init, eval mode: the block must be the identity on the
        # non-negative inputs it sees in the network.
        block = DoubleResidualBlock(4).eval()
        with torch.no_grad():
            for unit in (block.unit1, block.unit2):
                unit.conv1.weight.zero_()
                unit.conv2.weight.zero_()
        x = torch.rand(2, 4, 10, 10)
        assert torch.equal(block(x), x)

    def test_shape_preserved(self):
        block = DoubleResidualBlock(16).eval()
        x = torch.rand(1, 16, 64, 64)
        assert block(x).shape == x.shape

    def test_channel_mismatch_rejected(self):
        block = DoubleResidualBlock(8)
        with pytest.raises(ShapeError):
            block(torch.rand(1, 4, 8, 8))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        block = DoubleResidualBlock(2).double().eval()
        jitter_parameters(block, seed=5)
        x = torch.rand(1, 2, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

        def loss():
            return (block(x) ** 2).mean()

        loss().backward()
        worst = fd_gradcheck(block.parameters(), loss, n_per_tensor=20,
                             atol=1e-10, rtol=1e-4, seed=2)
        assert worst < 1.0


class TestCompression:
    def test_channel_contract(self):
        comp = Compression(64, 16, DropBlockConfig(7, 0.86)).eval()
        out = comp(torch.rand(1, 64, 128, 128))
        assert out.shape == (1, 16, 128, 128)

    def test_identity_rows_passthrough(self):
        comp = Compression(6, 3, DropBlockConfig(3, 0.9)).eval()
        with torch.no_grad():
            comp.conv.weight.zero_()
            comp.conv.bias.zero_()
            for i in range(3):
                comp.conv.weight[i, i, 0, 0] = 1.0
        x = torch.rand(2, 6, 9, 9)
        assert torch.equal(comp(x), x[:, :3])

    def test_zero_target_channels_rejected(self):
        with pytest.raises(ConfigError):
            Compression(8, 0, DropBlockConfig(3, 0.9))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(3)
        comp = Compression(3, 2, DropBlockConfig(3, 0.9)).double().eval()
        jitter_parameters(comp, seed=6)
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(4))

        def loss():
            return (comp(x) ** 2).mean()

        loss().backward()
        worst = fd_gradcheck(comp.parameters(), loss, n_per_tensor=20,
                             atol=1e-10, rtol=1e-4, seed=7)
        assert worst < 1.0


class TestResample:
    def test_single_maxpool_step(self):
        res = Resample(16, (512, 512), (256, 256))
        x = torch.rand(1, 16, 512, 512)
        out = res(x)
        assert out.shape == (1, 16, 256, 256)
        # Independent oracle: block-max over 2x2 tiles.
        blocks = x.reshape(1, 16, 256, 2, 256, 2)
        expected = blocks.amax(dim=(3, 5))
        assert torch.equal(out, expected)

    def test_repeated_pooling(self):
        res = Resample(2, (32, 32), (8, 8))
        out = res(torch.rand(1, 2, 32, 32))
        assert out.shape == (1, 2, 8, 8)

    def test_identity_when_equal(self):
        res = Resample(4, (16, 16), (16, 16))
        x = torch.rand(1, 4, 16, 16)
        assert res(x) is x

    def test_constant_map_stays_constant_under_pooling(self):
        res = Resample(1, (16, 16), (4, 4))
        out = res(torch.full((1, 1, 16, 16), 3.5))
        assert torch.equal(out, torch.full((1, 1, 4, 4), 3.5))

    def test_upsampling_shape_and_zero_preservation(self):
        res = Resample(3, (8, 8), (32, 32))
        out = res(torch.zeros(1, 3, 8, 8))
        assert out.shape == (1, 3, 32, 32)
        # Transposed-conv bias starts at zero, so zero input stays zero.
        assert torch.equal(out, torch.zeros(1, 3, 32, 32))

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ConfigError):
            Resample(4, (12, 12), (8, 8))
        with pytest.raises(ConfigError):
            Resample(4, (8, 16), (16, 16))

    def test_wrong_input_size_rejected(self):
        res = Resample(2, (16, 16), (8, 8))
        with pytest.raises(ShapeError):
            res(torch.rand(1, 2, 12, 12))


class TestAdaptiveAggregation:
    def test_single_direct_input_is_identity(self):
        spec = AggregationSpec(target_h=16, target_w=16, compressed_channels=4, direct_index=0)
        agg = AdaptiveAggregation([(8, 16, 16)], spec, DropBlockConfig(3, 0.9)).eval()
        x = torch.rand(1, 8, 16, 16)
        assert torch.equal(agg([x]), x)

    def test_documented_shape_example(self):
        # direct (16, 512, 512) + one input (32, 256, 256) compressed to 16
        # at target 512x512 concatenates to (32, 512, 512).
        spec = AggregationSpec(target_h=512, target_w=512, compressed_channels=16, direct_index=0)
        agg = AdaptiveAggregation(
            [(16, 512, 512), (32, 256, 256)], spec, DropBlockConfig(7, 0.86)
        ).eval()
        out = agg([torch.rand(1, 16, 512, 512), torch.rand(1, 32, 256, 256)])
        assert out.shape == (1, 32, 512, 512)
        assert agg.out_channels == 32

    def test_zero_inputs_give_zero_output(self):
        spec = AggregationSpec(target_h=16, target_w=16, compressed_channels=2, direct_index=1)
        agg = AdaptiveAggregation(
            [(4, 8, 8), (3, 32, 32)], spec, DropBlockConfig(3, 0.9)
        ).eval()
        out = agg([torch.zeros(1, 4, 8, 8), torch.zeros(1, 3, 32, 32)])
        assert torch.equal(out, torch.zeros(1, 5, 16, 16))

    def test_empty_inputs_rejected(self):
        spec = AggregationSpec(target_h=8, target_w=8, compressed_channels=1, direct_index=0)
        with pytest.raises(ConfigError):
            AdaptiveAggregation([], spec, DropBlockConfig(3, 0.9))

    def test_bad_direct_index_rejected(self):
        spec = AggregationSpec(target_h=8, target_w=8, compressed_channels=1, direct_index=2)
        with pytest.raises(ConfigError):
            AdaptiveAggregation([(2, 8, 8)], spec, DropBlockConfig(3, 0.9))
        spec_none = AggregationSpec(target_h=8, target_w=8, compressed_channels=1, direct_index=None)
        with pytest.raises(ConfigError):
            AdaptiveAggregation([(2, 8, 8)], spec_none, DropBlockConfig(3, 0.9))

    def test_wrong_input_count_rejected(self):
        spec = AggregationSpec(target_h=8, target_w=8, compressed_channels=1, direct_index=0)
        agg = AdaptiveAggregation([(2, 8, 8), (2, 8, 8)], spec, DropBlockConfig(3, 0.9))
        with pytest.raises(ShapeError):
            agg([torch.rand(1, 2, 8, 8)])

    @settings(max_examples=20, deadline=None)
    @given(
        n_inputs=st.integers(1, 4),
        direct=st.integers(0, 3),
        compressed=st.integers(1, 3),
        data=st.data(),
    )
    def test_output_channels_follow_sum_rule(self, n_inputs, direct, compressed, data):
        direct = direct % n_inputs
        target = 16
        shapes = []
        for _ in range(n_inputs):
            ch = data.draw(st.integers(1, 5))
            size = data.draw(st.sampled_from([4, 8, 16, 32]))
            shapes.append((ch, size, size))
        spec = AggregationSpec(target_h=target, target_w=target,
                               compressed_channels=compressed, direct_index=direct)
        agg = AdaptiveAggregation(shapes, spec, DropBlockConfig(3, 0.9)).eval()
        expected = sum(
            shapes[i][0] if i == direct else compressed for i in range(n_inputs)
        )
        assert agg.out_channels == expected
        inputs = [torch.rand(1, ch, h, w) for ch, h, w in shapes]
        out = agg(inputs)
        assert out.shape == (1, expected, target, target)

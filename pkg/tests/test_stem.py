"""Residual stem: geometry, identity behavior, and parameter naming."""

import numpy as np
import pytest

from madvit.errors import ConfigurationError, DimensionError
from madvit.stem import StemCNN, StemConfig, stage_output_size, stem_forward
from madvit.tensor import Tensor


def build(rng, **kwargs):
    config = StemConfig(**kwargs)
    return StemCNN.create(config, rng)


def test_output_shape_defaults(rng):
    stem = build(rng)
    out = stem_forward(Tensor(rng.random((48, 48, 3))), stem)
    assert out.shape == (6, 6, 64)


def test_output_shape_stage_two(rng):
    stem = build(rng, output_stage=2)
    out = stem_forward(Tensor(rng.random((48, 48, 3))), stem)
    assert out.shape == (12, 12, 32)


def test_output_shape_batched(rng):
    stem = build(rng, input_size=16, stage_channels=(4, 8), blocks_per_stage=1,
                 output_stage=2)
    out = stem_forward(Tensor(rng.random((3, 16, 16, 3))), stem)
    assert out.shape == (3, 4, 4, 8)


def test_stage_size_trail_for_large_input():
    # halving trail for a 112-pixel input: 56, 28, 14, 7
    assert [stage_output_size(112, s) for s in (1, 2, 3, 4)] == [56, 28, 14, 7]


def test_output_shape_formula_grid(rng):
    for size in (32, 48):
        for stage in (2, 3, 4):
            config = StemConfig(input_size=size, stage_channels=(4, 8, 16, 32),
                                blocks_per_stage=1, output_stage=stage)
            assert config.output_shape() == (
                size // 2 ** stage, size // 2 ** stage, (4, 8, 16, 32)[stage - 1])


def test_config_rejects_bad_stage():
    for stage in (0, 1, 5):
        with pytest.raises(ConfigurationError):
            StemConfig(output_stage=stage)


def test_config_rejects_indivisible_size():
    with pytest.raises(ConfigurationError):
        StemConfig(input_size=50, output_stage=3)


def test_config_rejects_short_channel_list():
    with pytest.raises(ConfigurationError):
        StemConfig(stage_channels=(16, 32), output_stage=3)


def test_config_rejects_zero_blocks():
    with pytest.raises(ConfigurationError):
        StemConfig(blocks_per_stage=0)


def test_forward_rejects_wrong_image_shape(rng):
    stem = build(rng, input_size=16, stage_channels=(4, 8), blocks_per_stage=1,
                 output_stage=2)
    for shape in ((8, 8, 3), (16, 16, 1), (16, 16)):
        with pytest.raises(DimensionError):
            stem_forward(Tensor(np.zeros(shape)), stem)


def test_residual_block_identity_with_zero_weights(rng):
    stem = build(rng, input_size=16, stage_channels=(4, 8), blocks_per_stage=2,
                 output_stage=2)
    block = stem.stages[0].blocks[0]
    for t in (block.conv1, block.conv1_bias, block.conv2, block.conv2_bias):
        t.data[...] = 0.0
    x = Tensor(rng.standard_normal((16, 16, 3)))
    np.testing.assert_array_equal(block.forward(x).data, x.data)


def test_parameter_names_and_order(rng):
    stem = build(rng, input_size=16, stage_channels=(4, 8), blocks_per_stage=1,
                 output_stage=2)
    names = [name for name, _ in stem.parameters()]
    assert names == [
        "stem.stage1.block1.conv1", "stem.stage1.block1.conv1.bias",
        "stem.stage1.block1.conv2", "stem.stage1.block1.conv2.bias",
        "stem.stage1.down", "stem.stage1.down.bias",
        "stem.stage2.block1.conv1", "stem.stage2.block1.conv1.bias",
        "stem.stage2.block1.conv2", "stem.stage2.block1.conv2.bias",
        "stem.stage2.down", "stem.stage2.down.bias",
    ]


def test_parameter_shapes_follow_channel_plan(rng):
    stem = build(rng, input_size=32, stage_channels=(4, 8, 16), blocks_per_stage=1,
                 output_stage=3)
    shapes = dict((name, t.shape) for name, t in stem.parameters())
    assert shapes["stem.stage1.block1.conv1"] == (3, 3, 3, 3)
    assert shapes["stem.stage1.down"] == (3, 3, 3, 4)
    assert shapes["stem.stage2.block1.conv1"] == (3, 3, 4, 4)
    assert shapes["stem.stage2.down"] == (3, 3, 4, 8)
    assert shapes["stem.stage3.down"] == (3, 3, 8, 16)
    assert shapes["stem.stage3.down.bias"] == (16,)


def test_biases_start_at_zero_and_kernels_vary(rng):
    stem = build(rng, input_size=16, stage_channels=(4, 8), blocks_per_stage=1,
                 output_stage=2)
    for name, t in stem.parameters():
        if name.endswith(".bias"):
            assert np.all(t.data == 0.0)
        else:
            assert np.std(t.data) > 0.0


def test_batched_forward_matches_per_sample(rng):
    stem = build(rng, input_size=16, stage_channels=(4, 8), blocks_per_stage=1,
                 output_stage=2)
    batch = Tensor(rng.random((3, 16, 16, 3)))
    together = stem_forward(batch, stem).data
    for i in range(3):
        single = stem_forward(Tensor(batch.data[i]), stem).data
        np.testing.assert_array_equal(together[i], single)

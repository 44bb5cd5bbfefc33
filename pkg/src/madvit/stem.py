"""Convolutional stem: residual stages that halve resolution as depth grows.

Stage i applies `blocks_per_stage` residual blocks at the incoming channel
width, then a stride-2 3x3 convolution that moves to stage i's channel count.
After stage i the spatial side is input_size / 2^i. Features are tapped at a
configurable stage (stage 1 is always computed but is too shallow to tap).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, add, as_tensor, conv2d, parameter, relu

IMAGE_CHANNELS = 3


def stage_output_size(input_size: int, stage: int) -> int:
    """Spatial side length after `stage` halvings."""
    return input_size // (2 ** stage)


@dataclass(frozen=True)
class StemConfig:
    input_size: int = 48
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    output_stage: int = 3

    def __post_init__(self):
        if self.output_stage not in (2, 3, 4):
            raise ConfigurationError(f"output_stage must be 2, 3 or 4, got {self.output_stage}")
        if len(self.stage_channels) < self.output_stage:
            raise ConfigurationError(
                f"need at least {self.output_stage} stage channel counts, got {self.stage_channels}")
        if self.blocks_per_stage < 1:
            raise ConfigurationError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        divisor = 2 ** self.output_stage
        if self.input_size % divisor != 0 or self.input_size < divisor:
            raise ConfigurationError(
                f"input size {self.input_size} is not divisible by 2^{self.output_stage}")

    def output_shape(self) -> tuple[int, int, int]:
        side = stage_output_size(self.input_size, self.output_stage)
        return side, side, self.stage_channels[self.output_stage - 1]


@dataclass
class ResidualBlock:
    """x + conv2(relu(conv1(x))); identity when all weights and biases are zero."""

    conv1: Tensor
    conv1_bias: Tensor
    conv2: Tensor
    conv2_bias: Tensor

    def forward(self, x: Tensor) -> Tensor:
        y = relu(add(conv2d(x, self.conv1, stride=1, padding=1), self.conv1_bias))
        y = add(conv2d(y, self.conv2, stride=1, padding=1), self.conv2_bias)
        return add(x, y)


@dataclass
class Stage:
    blocks: list[ResidualBlock]
    down: Tensor
    down_bias: Tensor

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block.forward(x)
        return add(conv2d(x, self.down, stride=2, padding=1), self.down_bias)


def _he_kernel(rng, k: int, c_in: int, c_out: int) -> Tensor:
    std = np.sqrt(2.0 / (k * k * c_in))
    return parameter(rng.normal(0.0, std, (k, k, c_in, c_out)))


@dataclass
class StemCNN:
    config: StemConfig
    stages: list[Stage] = field(default_factory=list)

    @classmethod
    def create(cls, config: StemConfig, rng) -> "StemCNN":
        stages = []
        c_in = IMAGE_CHANNELS
        for i in range(config.output_stage):
            blocks = [
                ResidualBlock(
                    conv1=_he_kernel(rng, 3, c_in, c_in),
                    conv1_bias=parameter(np.zeros(c_in)),
                    conv2=_he_kernel(rng, 3, c_in, c_in),
                    conv2_bias=parameter(np.zeros(c_in)),
                )
                for _ in range(config.blocks_per_stage)
            ]
            c_out = config.stage_channels[i]
            stages.append(Stage(
                blocks=blocks,
                down=_he_kernel(rng, 3, c_in, c_out),
                down_bias=parameter(np.zeros(c_out)),
            ))
            c_in = c_out
        return cls(config=config, stages=stages)

    def forward(self, image: Tensor) -> Tensor:
        image = as_tensor(image)
        size = self.config.input_size
        spatial = image.shape[-3:-1]
        if image.ndim not in (3, 4) or spatial != (size, size) or image.shape[-1] != IMAGE_CHANNELS:
            raise DimensionError(
                f"expected image shaped ({size}, {size}, {IMAGE_CHANNELS}) "
                f"with optional batch axis, got {image.shape}")
        x = image
        for stage in self.stages:
            x = stage.forward(x)
        return x

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, stage in enumerate(self.stages, start=1):
            for j, block in enumerate(stage.blocks, start=1):
                prefix = f"stem.stage{i}.block{j}"
                named.append((f"{prefix}.conv1", block.conv1))
                named.append((f"{prefix}.conv1.bias", block.conv1_bias))
                named.append((f"{prefix}.conv2", block.conv2))
                named.append((f"{prefix}.conv2.bias", block.conv2_bias))
            named.append((f"stem.stage{i}.down", stage.down))
            named.append((f"stem.stage{i}.down.bias", stage.down_bias))
        return named


def stem_forward(image: Tensor, stem: StemCNN) -> Tensor:
    """Run the stem on one image or a batch of images."""
    return stem.forward(image)

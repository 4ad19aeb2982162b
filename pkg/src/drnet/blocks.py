"""Reusable computational blocks.

DropBlock (structured dropout over square regions), the double residual
block used in every encoder/decoder stage, and the compress / resample /
aggregate operations that fuse feature maps of different scales in the
decoder.

All operations are deterministic given (input, parameters, rng seed);
randomness only enters through explicit seeds or generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError, ShapeError


@dataclass
class DropBlockConfig:
    """Structured-dropout settings.

    ``block_size`` is the side of the square regions that get zeroed,
    ``keep_prob`` the target fraction of activation units retained.  When
    ``training`` is false, application is the identity function.
    """

    block_size: int = 7
    keep_prob: float = 0.86
    training: bool = True

    def validate(self, feat_h: Optional[int] = None, feat_w: Optional[int] = None) -> None:
        if int(self.block_size) != self.block_size or self.block_size < 1:
            raise ConfigError(f"block_size must be a positive integer, got {self.block_size}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if feat_h is not None and feat_w is not None:
            if self.block_size > min(feat_h, feat_w):
                raise ConfigError(
                    f"block_size {self.block_size} exceeds feature dimensions "
                    f"{feat_h}x{feat_w}"
                )


def dropblock_gamma(keep_prob: float, block_size: int, feat_h: int, feat_w: int) -> float:
    """Bernoulli rate for sampling block seed positions.

    Chosen so that the expected number of zeroed units is (1 - keep_prob)
    of the feature map, given that seeds are only placed where a full
    block fits:

        gamma = (1 - keep_prob) / block_size^2
                * (H * W) / ((H - block_size + 1) * (W - block_size + 1))
    """
    DropBlockConfig(block_size=block_size, keep_prob=keep_prob).validate(feat_h, feat_w)
    valid_h = feat_h - block_size + 1
    valid_w = feat_w - block_size + 1
    gamma = (1.0 - keep_prob) / block_size**2 * (feat_h * feat_w) / (valid_h * valid_w)
    return gamma


def _sample_keep_mask(
    shape: tuple[int, int, int, int],
    block_size: int,
    keep_prob: float,
    generator: Optional[torch.Generator],
    device: torch.device,
) -> Optional[torch.Tensor]:
    """Sample a (B, C, H, W) keep mask: 1 keep, 0 drop.

    Seeds are drawn Bernoulli(gamma) on the interior grid where a full
    block fits, then dilated to block_size x block_size squares, so no
    block ever crosses the feature boundary.  Masks are independent per
    channel and per batch element.  Returns None when nothing can drop.
    """
    b, c, h, w = shape
    gamma = dropblock_gamma(keep_prob, block_size, h, w)
    if gamma == 0.0:
        return None
    valid_h = h - block_size + 1
    valid_w = w - block_size + 1
    u = torch.rand((b, c, valid_h, valid_w), generator=generator, device=device)
    seeds = (u < gamma).to(torch.float32)
    # Dilate each seed (block top-left corner) to its full square via a
    # stride-1 max pool over the zero-padded seed grid.
    pad = block_size - 1
    padded = F.pad(seeds, (pad, pad, pad, pad))
    dropped = F.max_pool2d(padded, kernel_size=block_size, stride=1)
    return 1.0 - dropped


def _apply_keep_mask(x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    total = keep.numel()
    retained = keep.sum()
    if retained.item() == 0.0:
        return torch.zeros_like(x)
    # Rescale survivors so the expected activation magnitude is preserved.
    return x * keep * (total / retained)


def dropblock_apply(features, config: DropBlockConfig, rng_seed: int):
    """Apply DropBlock to a (C, H, W) or (B, C, H, W) feature map.

    Training mode zeroes randomly seeded squares and rescales survivors by
    (total units / retained units); inference mode returns the input
    unchanged.  Accepts torch tensors or numpy arrays and returns the same
    kind.
    """
    is_numpy = isinstance(features, np.ndarray)
    x = torch.as_tensor(features) if is_numpy else features
    if x.dim() == 3:
        x4 = x.unsqueeze(0)
        squeeze = True
    elif x.dim() == 4:
        x4 = x
        squeeze = False
    else:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got shape {tuple(x.shape)}")
    if not torch.isfinite(x4).all():
        raise NumericError("dropblock input contains non-finite values")
    config.validate(x4.shape[-2], x4.shape[-1])

    if not config.training:
        return features
    gen = torch.Generator(device="cpu").manual_seed(int(rng_seed))
    keep = _sample_keep_mask(tuple(x4.shape), config.block_size, config.keep_prob, gen, x4.device)
    if keep is None:
        return features
    out = _apply_keep_mask(x4.to(torch.float32) if is_numpy else x4, keep)
    if squeeze:
        out = out.squeeze(0)
    return out.numpy().astype(features.dtype) if is_numpy else out


def dropblock_keep_mask(
    height: int, width: int, config: DropBlockConfig, rng_seed: int
) -> np.ndarray:
    """Sample one keep mask as a uint8 image (255 keep, 0 drop).

    Debugging helper: lets callers dump the exact masks the layer would
    draw for a given seed.
    """
    config.validate(height, width)
    gen = torch.Generator(device="cpu").manual_seed(int(rng_seed))
    keep = _sample_keep_mask(
        (1, 1, height, width), config.block_size, config.keep_prob, gen, torch.device("cpu")
    )
    if keep is None:
        return np.full((height, width), 255, dtype=np.uint8)
    return (keep[0, 0].numpy() * 255).astype(np.uint8)


class DropBlock2d(nn.Module):
    """DropBlock layer: zeroes contiguous squares of the feature map.

    Active only in training mode.  Deterministic masks can be obtained by
    assigning a seeded ``torch.Generator`` to ``self.generator``; the model
    wires one shared generator through all of its DropBlock layers per
    forward pass.
    """

    def __init__(self, block_size: int = 7, keep_prob: float = 0.86):
        super().__init__()
        DropBlockConfig(block_size=block_size, keep_prob=keep_prob).validate()
        self.block_size = block_size
        self.keep_prob = keep_prob
        self.generator: Optional[torch.Generator] = None

    def extra_repr(self) -> str:
        return f"block_size={self.block_size}, keep_prob={self.keep_prob}"

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.keep_prob == 1.0:
            return x
        if x.dim() != 4:
            raise ShapeError(f"DropBlock2d expects (B, C, H, W), got shape {tuple(x.shape)}")
        keep = _sample_keep_mask(
            tuple(x.shape), self.block_size, self.keep_prob, self.generator, x.device
        )
        if keep is None:
            return x
        return _apply_keep_mask(x, keep.to(x.dtype))


class _ResidualUnit(nn.Module):
    """identity(x) + (conv3x3 -> BN -> ReLU -> conv3x3 -> BN), ReLU after the sum."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        branch = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return F.relu(x + branch)


class DoubleResidualBlock(nn.Module):
    """Two stacked residual units, preserving channel count and resolution."""

    def __init__(self, channels: int):
        super().__init__()
        if channels < 1:
            raise ConfigError(f"channels must be positive, got {channels}")
        self.channels = channels
        self.unit1 = _ResidualUnit(channels)
        self.unit2 = _ResidualUnit(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(
                f"expected (B, {self.channels}, H, W), got shape {tuple(x.shape)}"
            )
        return self.unit2(self.unit1(x))


class Compression(nn.Module):
    """DropBlock followed by a 1x1 convolution that adjusts the channel count."""

    def __init__(self, in_channels: int, out_channels: int, dropblock: DropBlockConfig):
        super().__init__()
        if out_channels < 1:
            raise ConfigError(f"target channel count must be >= 1, got {out_channels}")
        self.drop = DropBlock2d(dropblock.block_size, dropblock.keep_prob)
        self.conv = nn.Conv2d(in_channels, out_channels, 1)
        with torch.no_grad():
            self.conv.bias.zero_()

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.drop(x))


def _pow2_steps(src: int, dst: int) -> int:
    """Number of doubling steps from src to dst; negative means halving."""
    if src == dst:
        return 0
    big, small = max(src, dst), min(src, dst)
    if small <= 0 or big % small != 0:
        raise ConfigError(f"sizes {src} -> {dst} are not related by a power of 2")
    ratio = big // small
    steps = ratio.bit_length() - 1
    if 2**steps != ratio:
        raise ConfigError(f"sizes {src} -> {dst} are not related by a power of 2")
    return steps if dst > src else -steps


class Resample(nn.Module):
    """Bring a feature map to a target resolution.

    Downsampling uses repeated 2x2 max pooling, upsampling repeated
    stride-2 transposed convolutions (learned); equal size is the
    identity.  Source and target sizes must be related by a power of 2.
    """

    def __init__(self, channels: int, in_hw: tuple[int, int], out_hw: tuple[int, int]):
        super().__init__()
        steps_h = _pow2_steps(in_hw[0], out_hw[0])
        steps_w = _pow2_steps(in_hw[1], out_hw[1])
        if steps_h != steps_w:
            raise ConfigError(
                f"anisotropic resampling {in_hw} -> {out_hw} is not supported"
            )
        self.in_hw = tuple(in_hw)
        self.out_hw = tuple(out_hw)
        self.steps = steps_h
        if self.steps > 0:
            self.up = nn.ModuleList(
                nn.ConvTranspose2d(channels, channels, 2, stride=2) for _ in range(self.steps)
            )
            with torch.no_grad():
                for layer in self.up:
                    layer.bias.zero_()
        else:
            self.up = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.in_hw:
            raise ShapeError(f"expected spatial size {self.in_hw}, got {tuple(x.shape[-2:])}")
        if self.steps == 0:
            return x
        if self.steps < 0:
            for _ in range(-self.steps):
                x = F.max_pool2d(x, 2)
            return x
        for layer in self.up:
            x = layer(x)
        return x


@dataclass
class AggregationSpec:
    """Target geometry and compression plan for one aggregation block.

    Exactly one input (``direct_index``) bypasses compression and is only
    resampled; every other input is compressed to ``compressed_channels``
    channels before resampling.
    """

    target_h: int
    target_w: int
    compressed_channels: int
    direct_index: int


class AdaptiveAggregation(nn.Module):
    """Fuse feature maps from earlier blocks into one map at a target scale.

    Each non-direct input goes through DropBlock + 1x1 convolution
    (compression) and is then resampled to the target resolution; the
    direct input is resampled only.  The results are concatenated along
    the channel axis in input order.
    """

    def __init__(
        self,
        input_shapes: Sequence[tuple[int, int, int]],
        spec: AggregationSpec,
        dropblock: DropBlockConfig,
    ):
        super().__init__()
        if len(input_shapes) == 0:
            raise ConfigError("aggregation requires at least one input")
        if spec.direct_index is None or not 0 <= spec.direct_index < len(input_shapes):
            raise ConfigError(
                f"direct_index {spec.direct_index} invalid for {len(input_shapes)} inputs"
            )
        if spec.compressed_channels < 1:
            raise ConfigError("compressed_channels must be >= 1")
        self.input_shapes = [tuple(s) for s in input_shapes]
        self.spec = spec
        compress = []
        resample = []
        out_channels = 0
        for i, (ch, h, w) in enumerate(self.input_shapes):
            if i == spec.direct_index:
                compress.append(nn.Identity())
                branch_ch = ch
            else:
                compress.append(Compression(ch, spec.compressed_channels, dropblock))
                branch_ch = spec.compressed_channels
            resample.append(Resample(branch_ch, (h, w), (spec.target_h, spec.target_w)))
            out_channels += branch_ch
        self.compress = nn.ModuleList(compress)
        self.resample = nn.ModuleList(resample)
        self.out_channels = out_channels

    def forward(self, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(inputs) != len(self.input_shapes):
            raise ShapeError(
                f"expected {len(self.input_shapes)} inputs, got {len(inputs)}"
            )
        branches = []
        for x, (ch, h, w), comp, res in zip(
            inputs, self.input_shapes, self.compress, self.resample
        ):
            if x.shape[1] != ch or tuple(x.shape[-2:]) != (h, w):
                raise ShapeError(
                    f"input shape {tuple(x.shape[1:])} does not match declared ({ch}, {h}, {w})"
                )
            branches.append(res(comp(x)))
        return torch.cat(branches, dim=1)


def count_scalar_parameters(module: nn.Module) -> int:
    """Total number of learnable scalar parameters in a module."""
    return sum(p.numel() for p in module.parameters())


def init_module_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Variance-scaled normal init for conv weights, deterministic per generator.

    Iterates modules in registration order so the same seed always yields
    the same parameters.  BatchNorm starts as the identity affine map.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)

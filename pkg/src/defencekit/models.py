"""The three networks: the occlusion segmenter, the gated-convolution
inpainting generator, and the shared critic architecture used for both the
texture and structure discriminators.

Desk-scale defaults (64x64 images, narrow channels) keep CPU training under
minutes; paper-scale shapes remain constructible through the configs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    Aspp,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    DenseBlock,
    GatedConv2d,
    Linear,
    Module,
    SelfAttention2d,
    SpectralNormConv2d,
)
from .tensor import Rng, ShapeError, Tensor

__all__ = [
    "OccNetConfig",
    "GeneratorConfig",
    "DiscriminatorConfig",
    "OccNet",
    "InpaintGenerator",
    "Discriminator",
    "composite_output",
]

# VGG16-style conv ladder: 13 layers in groups of (2, 2, 3, 3, 3)
VGG_LADDER = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
VGG_GROUPS = (2, 2, 3, 3, 3)


@dataclass
class OccNetConfig:
    width_multiplier: float = 0.125
    in_channels: int = 3

    def channels(self) -> list[int]:
        return [max(1, int(round(c * self.width_multiplier))) for c in VGG_LADDER]


@dataclass
class GeneratorConfig:
    base_channels: int = 16
    growth: int = 8
    block_layers: int = 4
    ddb_rates: tuple[int, ...] = (2, 4, 6, 8)


@dataclass
class DiscriminatorConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (64, 128, 256, 256, 256, 256, 256)
    kernel: int = 4
    stride: int = 2
    padding: int = 2
    input_size: int = 64

    def strides(self) -> list[int]:
        # small inputs keep seven layers by running the two deepest at stride 1
        strides = [self.stride] * len(self.channels)
        if self.input_size < 256:
            strides[-2:] = [1, 1]
        return strides


class _EncoderGroup(Module):
    """conv(+BN+ReLU) stack; the first conv changes the channel count."""

    def __init__(self, rng: Rng, in_ch: int, out_ch: int, convs: int):
        self.convs = []
        self.norms = []
        ch = in_ch
        for i in range(convs):
            self.convs.append(Conv2d(rng.stream(f"conv{i}"), ch, out_ch, 3))
            self.norms.append(BatchNorm2d(out_ch))
            ch = out_ch

    def forward(self, x: Tensor) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = T.activation(norm(conv(x)), "relu")
        return x


class OccNet(Module):
    """Encoder/decoder occlusion segmenter.

    The encoder is a 13-conv ladder with four 2x2 max-pool stages; a four-rate
    atrous block sits at the bottom; the decoder mirrors the encoder with
    transposed-convolution upsampling and concatenative skip connections,
    ending in a 1x1 conv and a sigmoid, at the input resolution.  Input
    spatial extents must be divisible by 16.
    """

    POOLS = 4

    def __init__(self, config: OccNetConfig, rng: Rng):
        self.config = config
        chans = config.channels()
        group_out = []
        self.enc_groups = []
        idx = 0
        ch = config.in_channels
        for gi, g in enumerate(VGG_GROUPS):
            out_ch = chans[idx + g - 1]
            self.enc_groups.append(
                _EncoderGroup(rng.stream(f"enc{gi}"), ch, out_ch, g))
            group_out.append(out_ch)
            ch = out_ch
            idx += g
        self.aspp = Aspp(rng.stream("aspp"), ch, ch)
        self.ups = []
        self.dec_groups = []
        skip_chans = group_out[:4][::-1]  # groups 4,3,2,1 at H/8..H
        dec_convs = (3, 3, 2, 2)
        for di, (skip_ch, convs) in enumerate(zip(skip_chans, dec_convs)):
            self.ups.append(ConvTranspose2d(rng.stream(f"up{di}"), ch, skip_ch, 2, 2))
            self.dec_groups.append(
                _EncoderGroup(rng.stream(f"dec{di}"), 2 * skip_ch, skip_ch, convs))
            ch = skip_ch
        # zero-initialized head: the untrained net predicts 0.5 everywhere
        self.head = Conv2d(rng.stream("head"), ch, 1, kernel=1, padding=0, zero_init=True)
        self.forward_count = 0

    @property
    def encoder_conv_count(self) -> int:
        return sum(len(g.convs) for g in self.enc_groups)

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected N x {self.config.in_channels} x H x W input, "
                             f"got {image.shape}")
        h, w = image.shape[2], image.shape[3]
        if h % 16 or w % 16:
            raise ShapeError(f"input extents must be divisible by 16, got {h}x{w}")
        self.forward_count += 1
        skips = []
        x = image
        for gi, group in enumerate(self.enc_groups):
            x = group(x)
            if gi < self.POOLS:
                skips.append(x)
                x = T.max_pool2(x)
        x = self.aspp(x)
        for up, dec, skip in zip(self.ups, self.dec_groups, skips[::-1]):
            x = T.concat([up(x), skip], axis=1)
            x = dec(x)
        return T.activation(self.head(x), "sigmoid")


class InpaintGenerator(Module):
    """Gated-convolution encoder/decoder with dense blocks, dilated dense
    blocks at the bottleneck, and self-attention between encoder and decoder.

    Input is the 3-channel image concatenated with its 1-channel mask; output
    is a 3-channel image through tanh, in (-1, 1), at the input resolution.
    """

    def __init__(self, config: GeneratorConfig, rng: Rng):
        self.config = config
        b, g, L = config.base_channels, config.growth, config.block_layers
        self.stem = GatedConv2d(rng.stream("stem"), 4, b, 3)
        self.db1 = DenseBlock(rng.stream("db1"), b, g, L, gated=True)
        c1 = self.db1.out_channels
        self.db2 = DenseBlock(rng.stream("db2"), c1, g, L, gated=True)
        c2 = self.db2.out_channels
        self.ddb = DenseBlock(rng.stream("ddb"), c2, g, len(config.ddb_rates),
                              dilations=config.ddb_rates, gated=True)
        c3 = self.ddb.out_channels
        self.attention = SelfAttention2d(rng.stream("attn"), c3)
        self.dec1 = GatedConv2d(rng.stream("dec1"), c3, c1, 3)
        self.dec2 = GatedConv2d(rng.stream("dec2"), c1, b, 3)
        self.out = GatedConv2d(rng.stream("out"), b, 3, 3, feature_act="tanh")
        self.forward_count = 0

    def forward(self, image: Tensor, mask: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected N x 3 x H x W image, got {image.shape}")
        if mask.shape != (image.shape[0], 1, image.shape[2], image.shape[3]):
            raise ShapeError(f"mask shape {mask.shape} does not match image {image.shape}")
        mv = mask.data
        if not np.all((mv == 0.0) | (mv == 1.0)):
            raise ValueError("mask must be binary")
        self.forward_count += 1
        x = T.concat([image, mask], axis=1)
        x = self.stem(x)
        x = T.max_pool2(self.db1(x))
        x = T.max_pool2(self.db2(x))
        x = self.attention(self.ddb(x))
        x = self.dec1(T.upsample_nearest2(x))
        x = self.dec2(T.upsample_nearest2(x))
        return self.out(x)


class Discriminator(Module):
    """Seven spectrally normalized 4x4 convolutions (leaky ReLU 0.2) and one
    fully connected layer producing one score per batch element."""

    def __init__(self, config: DiscriminatorConfig, rng: Rng):
        self.config = config
        self.convs = []
        ch = config.in_channels
        for i, (out_ch, stride) in enumerate(zip(config.channels, config.strides())):
            self.convs.append(SpectralNormConv2d(
                rng.stream(f"conv{i}"), ch, out_ch, config.kernel, stride, config.padding))
            ch = out_ch
        size = self._trace_spatial(config.input_size)[-1]
        self.fc = Linear(rng.stream("fc"), ch * size * size, 1)
        self.forward_count = 0

    def _trace_spatial(self, size: int) -> list[int]:
        sizes = []
        k, p = self.config.kernel, self.config.padding
        for i, stride in enumerate(self.config.strides()):
            size = (size + 2 * p - k) // stride + 1
            if size < 1:
                raise ShapeError(f"spatial size collapses to {size} at layer {i + 1}")
            sizes.append(size)
        return sizes

    def forward(self, image: Tensor) -> Tensor:
        n, c, h, w = image.shape
        if h != w:
            raise ShapeError(f"discriminator expects square inputs, got {h}x{w}")
        if h != self.config.input_size:
            raise ShapeError(f"discriminator built for {self.config.input_size}, got {h}")
        self.forward_count += 1
        x = image
        for conv in self.convs:
            x = T.activation(conv(x), "leaky_relu")
        return self.fc(T.reshape(x, (n, -1)))


def composite_output(raw: Tensor, input_image: Tensor, mask: Tensor) -> Tensor:
    """Paste generated content into masked pixels only.

    final = mask * raw + (1 - mask) * input; with a {0,1} mask the visible
    pixels are bit-identical to the input, and the operation is idempotent.
    """
    if raw.shape != input_image.shape:
        raise ShapeError(f"raw {raw.shape} vs input {input_image.shape}")
    return T.add(T.mul(mask, raw), T.mul(1.0 - mask, input_image))

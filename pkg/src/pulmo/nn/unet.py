"""Original U-Net and the Modified U-Net (BConvLSTM skips, dense bottleneck)."""
from __future__ import annotations

import numpy as np

from .. import ops
from ..errors import ConfigError
from .config import ModelConfig
from .convlstm import BConvLSTM
from .layers import Conv2d, ConvUnit, Dropout, Module, ModuleList, UpConv2d
from .model import Model


class DoubleConv(Module):
    def __init__(self, cin, cout, rng):
        super().__init__()
        self.conv1 = ConvUnit(cin, cout, rng)
        self.conv2 = ConvUnit(cout, cout, rng)

    def forward(self, x):
        return self.conv2(self.conv1(x))


class DenseBottleneck(Module):
    """Two conv pairs; the second sees concat(input, first pair output)."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.pair1 = DoubleConv(cin, cout, rng)
        self.pair2 = DoubleConv(cin + cout, cout, rng)

    def forward(self, x):
        return self.pair2(ops.concat_channels(x, self.pair1(x)))


class DecoderStep(Module):
    def __init__(self, channels, rng, fused: bool):
        super().__init__()
        self.up = UpConv2d(2 * channels, channels, rng)
        self.fuse = BConvLSTM(channels, rng) if fused else None
        self.convs = DoubleConv(channels if fused else 2 * channels, channels, rng)

    def forward(self, x, skip):
        up = self.up(x)
        merged = self.fuse(skip, up) if self.fuse is not None else ops.concat_channels(skip, up)
        return self.convs(merged)


class Head(Module):
    capturable = True

    def __init__(self, cin, rng):
        super().__init__()
        self.conv = Conv2d(cin, 1, 1, rng)

    def forward(self, x):
        return ops.sigmoid(self.conv(x))


class UNet(Model):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config)
        base, depth = config.base_channels, config.depth
        fused = config.family == "modified_unet"
        self.enc = ModuleList()
        cin = config.input_channels
        for i in range(depth):
            self.enc.append(DoubleConv(cin, base * 2**i, rng))
            cin = base * 2**i
        cb = base * 2**depth
        self.bottleneck = DenseBottleneck(cin, cb, rng) if fused else DoubleConv(cin, cb, rng)
        self.dropout = Dropout(config.dropout_rate)
        self.dec = ModuleList(DecoderStep(base * 2**i, rng, fused) for i in reversed(range(depth)))
        self.head = Head(base, rng)

    def forward(self, x):
        skips = []
        for step in self.enc:
            x = step(x)
            skips.append(x)
            x = ops.maxpool2d(x)
        x = self.dropout(self.bottleneck(x))
        for step, skip in zip(self.dec, reversed(skips)):
            x = step(x, skip)
        return self.head(x)


def build_unet(config: ModelConfig, seed: int = 0) -> UNet:
    if config.family != "unet":
        raise ConfigError(f"build_unet needs family 'unet', got {config.family!r}")
    return UNet(config, np.random.default_rng(seed))


def build_modified_unet(config: ModelConfig, seed: int = 0) -> UNet:
    if config.family != "modified_unet":
        raise ConfigError(f"build_modified_unet needs family 'modified_unet', got {config.family!r}")
    return UNet(config, np.random.default_rng(seed))

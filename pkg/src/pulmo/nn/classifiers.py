"""Desk-scale classifier families: plain stacked conv, residual, densely connected.

Each family is ``depth`` pooled stages with channels doubling from
``base_channels``, then global average pooling, dropout and a dense layer that
emits logits.
"""
from __future__ import annotations

import numpy as np

from .. import ops
from ..errors import ConfigError
from .config import CLASSIFIER_FAMILIES, ModelConfig
from .layers import BatchNorm2d, Conv2d, ConvUnit, Dense, Dropout, Module, ModuleList
from .model import Model


class PlainBlock(Module):
    capturable = True

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.unit = ConvUnit(cin, cout, rng, batchnorm=True)

    def forward(self, x):
        return ops.maxpool2d(self.unit(x))


class ResidualUnit(Module):
    """relu(bn(conv(relu(bn(conv(x))))) + shortcut(x)); 1x1 projection when widths differ."""

    capturable = True

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.bn2 = BatchNorm2d(cout)
        self.project = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def shortcut(self, x):
        return self.project(x) if self.project is not None else x

    def branch(self, x):
        return self.bn2(self.conv2(ops.relu(self.bn1(self.conv1(x)))))

    def forward(self, x):
        return ops.relu(self.branch(x) + self.shortcut(x))


class ResidualBlock(Module):
    capturable = True

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.unit = ResidualUnit(cin, cout, rng)

    def forward(self, x):
        return ops.maxpool2d(self.unit(x))


class DenseStage(Module):
    """Each layer sees the concatenation of the stage input and every earlier layer output."""

    capturable = True

    def __init__(self, cin, growth, cout, rng, layers: int = 2):
        super().__init__()
        self.cin, self.growth = cin, growth
        self.layers = ModuleList(ConvUnit(cin + j * growth, growth, rng, batchnorm=True) for j in range(layers))
        self.transition = ConvUnit(cin + layers * growth, cout, rng, kernel=1, batchnorm=True)

    def features(self, x, upto: int | None = None):
        feats = [x]
        for layer in list(self.layers)[:upto]:
            feats.append(layer(ops.concat_channels(*feats)))
        return ops.concat_channels(*feats)

    def forward(self, x):
        return ops.maxpool2d(self.transition(self.features(x)))


class Classifier(Model):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config)
        self.blocks = ModuleList()
        cin = config.input_channels
        for i in range(config.depth):
            cout = config.base_channels * 2**i
            if config.family == "plain_cnn":
                block = PlainBlock(cin, cout, rng)
            elif config.family == "resnet_mini":
                block = ResidualBlock(cin, cout, rng)
            else:
                block = DenseStage(cin, max(1, cout // 2), cout, rng)
            self.blocks.append(block)
            cin = cout
        self.dropout = Dropout(config.dropout_rate)
        self.fc = Dense(cin, config.num_classes, rng)

    @property
    def default_cam_layer(self) -> str:
        """Output of the last convolution (before its pooling step)."""
        last = f"blocks.{len(self.blocks) - 1}"
        return f"{last}.transition" if self.config.family == "densenet_mini" else f"{last}.unit"

    def features(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, x):
        return self.fc(self.dropout(ops.global_avg_pool(self.features(x))))


def build_classifier(config: ModelConfig, seed: int = 0) -> Classifier:
    if config.family not in CLASSIFIER_FAMILIES:
        raise ConfigError(f"unknown classifier family {config.family!r}; expected one of {CLASSIFIER_FAMILIES}")
    return Classifier(config, np.random.default_rng(seed))

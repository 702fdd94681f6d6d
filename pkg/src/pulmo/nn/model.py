from __future__ import annotations

from .config import ModelConfig
from .layers import Conv2d, Module, UpConv2d


class Model(Module):
    """A network built from a :class:`ModelConfig`; ``forward`` maps N x C x H x W input to
    probabilities (segmentation) or logits (classification)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    @property
    def task(self) -> str:
        return self.config.task


def count_conv_layers(model: Module, include_recurrent: bool = False) -> int:
    """Convolution and up-convolution layers; ConvLSTM gate convs only on request."""
    n = 0
    for name, mod in model.named_modules():
        if not isinstance(mod, (Conv2d, UpConv2d)):
            continue
        if not include_recurrent and ("_cell." in name or name.endswith(".fuse.out")):
            continue
        n += 1
    return n

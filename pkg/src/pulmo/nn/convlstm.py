"""Bidirectional ConvLSTM fusion of a skip map with an up-sampled decoder map."""
from __future__ import annotations

import numpy as np

from .. import ops
from ..errors import DimensionError
from ..tensor import Tensor
from .layers import Conv2d, Module


class ConvLSTMCell(Module):
    """Gates i, f, o and candidate g from one 3x3 conv over concat(x_t, h_{t-1}).

    Output channels of ``gates`` are ordered [i | f | o | g].
    """

    def __init__(self, cin: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.gates = Conv2d(cin + hidden, 4 * hidden, 3, rng)

    def step(self, x: Tensor, h: Tensor | None, c: Tensor | None) -> tuple[Tensor, Tensor]:
        """One time step; ``h=c=None`` stands for the zero initial state."""
        k = self.hidden
        if h is None:
            # zero hidden state: only the x-half of the kernel contributes
            w = ops.channel_slice(self.gates.weight, 0, self.gates.weight.shape[1] - k)
            z = ops.conv2d(x, w, self.gates.bias, 1, self.gates.padding)
        else:
            z = self.gates(ops.concat_channels(x, h))
        i = ops.sigmoid(ops.channel_slice(z, 0, k))
        o = ops.sigmoid(ops.channel_slice(z, 2 * k, 3 * k))
        g = ops.tanh(ops.channel_slice(z, 3 * k, 4 * k))
        if c is None:
            c = i * g
        else:
            f = ops.sigmoid(ops.channel_slice(z, k, 2 * k))
            c = f * c + i * g
        h = o * ops.tanh(c)
        return h, c

    def run(self, xs: list[Tensor]) -> Tensor:
        h = c = None
        for x in xs:
            h, c = self.step(x, h, c)
        return h


class BConvLSTM(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.forward_cell = ConvLSTMCell(channels, channels, rng)
        self.backward_cell = ConvLSTMCell(channels, channels, rng)
        self.out = Conv2d(2 * channels, channels, 1, rng)

    def forward(self, skip, up):
        return bconvlstm_fuse(skip, up, self)


def bconvlstm_fuse(skip: Tensor, up: Tensor, params: BConvLSTM) -> Tensor:
    """tanh(1x1 conv(concat(h_fwd, h_bwd))) over the sequence (skip, up) and its reverse."""
    if skip.shape != up.shape:
        raise DimensionError(f"bconvlstm_fuse: skip {skip.shape} and up {up.shape} differ")
    h_fwd = params.forward_cell.run([skip, up])
    h_bwd = params.backward_cell.run([up, skip])
    return ops.tanh(params.out(ops.concat_channels(h_fwd, h_bwd)))

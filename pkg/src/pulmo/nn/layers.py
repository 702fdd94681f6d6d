"""Parameterized layers and the module container they live in."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .. import ops
from ..errors import CheckpointError, LayerLookupError
from ..tensor import Tensor, parameter


class Module:
    """Attribute-registered tree of parameters, buffers and submodules.

    Registration order (attribute assignment order) is the naming and
    iteration order, so state dicts are stable across runs.
    """

    capturable = False

    def __init__(self):
        self.training = True
        self._taps: list | None = None

    def forward(self, *args):
        raise NotImplementedError

    def __call__(self, *args):
        out = self.forward(*args)
        if self._taps is not None:
            self._taps.append(out)
        return out

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for mod_name, mod in self.named_modules():
            for key, value in vars(mod).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    out[f"{mod_name}.{key}" if mod_name else key] = value
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for mod_name, mod in self.named_modules():
            for key, arr in mod.buffers().items():
                out[f"{mod_name}.{key}" if mod_name else key] = arr
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.named_parameters()
        bufs = self.named_buffers()
        expected = list(own) + list(bufs)
        missing = [k for k in expected if k not in state]
        extra = [k for k in state if k not in own and k not in bufs]
        if missing or extra:
            raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k in expected:
            target = own[k].data if k in own else bufs[k]
            src = np.asarray(state[k])
            if src.shape != target.shape:
                raise CheckpointError(f"tensor {k}: shape {src.shape} does not match model shape {target.shape}")
            target[...] = src

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    # -- activation capture ---------------------------------------------
    def layer_ids(self) -> list[str]:
        return [name for name, mod in self.named_modules() if mod.capturable and name]

    def get_layer(self, layer_id: str) -> "Module":
        for name, mod in self.named_modules():
            if name == layer_id and mod.capturable:
                return mod
        raise LayerLookupError(layer_id, self.layer_ids())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._n = 0
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(self._n), module)
        self._n += 1

    def __len__(self):
        return self._n

    def __getitem__(self, i: int) -> Module:
        if i < 0:
            i += self._n
        return getattr(self, str(i))

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, padding: int | None = None):
        super().__init__()
        self.padding = kernel // 2 if padding is None else padding
        self.weight = parameter(he_uniform(rng, (cout, cin, kernel, kernel), cin * kernel * kernel))
        self.bias = parameter(np.zeros(cout, np.float32))

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, 1, self.padding)


class UpConv2d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.weight = parameter(he_uniform(rng, (cin, cout, 2, 2), cin))
        self.bias = parameter(np.zeros(cout, np.float32))

    def forward(self, x):
        return ops.up_conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.gamma = parameter(np.ones(channels, np.float32))
        self.beta = parameter(np.zeros(channels, np.float32))
        self.state = ops.BatchNormState.fresh(channels, momentum)

    def buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.state, "train" if self.training else "eval", self.eps)


class Dense(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator):
        super().__init__()
        self.weight = parameter(he_uniform(rng, (fin, fout), fin))
        self.bias = parameter(np.zeros(fout, np.float32))

    def forward(self, x):
        return ops.dense(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            return x
        if self.rng is None:
            self.rng = np.random.default_rng(0)
        return ops.dropout(x, self.rate, "train", self.rng)


class ConvUnit(Module):
    """kxk conv (same padding), optional batch norm, then ReLU."""

    capturable = True

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3, batchnorm: bool = False):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, rng)
        self.bn = BatchNorm2d(cout) if batchnorm else None

    def forward(self, x):
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return ops.relu(y)


def seed_dropout(model: Module, rng: np.random.Generator) -> None:
    for _, mod in model.named_modules():
        if isinstance(mod, Dropout):
            mod.rng = rng

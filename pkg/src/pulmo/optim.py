"""SGD with classical momentum."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import OptimizerError, UsageError
from .tensor import Tensor


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise UsageError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_momentum_step(params: Mapping[str, Tensor], config: OptimizerConfig) -> None:
    """v <- momentum * v + g;  p <- p - lr * v;  then clear gradients.

    Every parameter must carry a gradient; a missing one usually means it was
    not reached by the loss and is reported by name.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise OptimizerError(f"no gradient for parameter(s): {', '.join(missing)}")
    for name, p in params.items():
        v = config.velocity.get(name)
        if v is None:
            v = config.velocity[name] = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise OptimizerError(f"velocity buffer for {name} has shape {v.shape}, parameter has {p.data.shape}")
        v *= config.momentum
        v += p.grad
        p.data -= config.learning_rate * v
        p.grad = None

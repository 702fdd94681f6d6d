"""Model, schedule and history records."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from ..errors import ConfigError
from ..optim import OptimizerConfig

SEGMENTATION_FAMILIES = ("unet", "modified_unet")
CLASSIFIER_FAMILIES = ("plain_cnn", "resnet_mini", "densenet_mini")


@dataclass(frozen=True)
class ModelConfig:
    task: str = "segmentation"
    family: str = "unet"
    input_size: tuple[int, int] = (64, 64)
    input_channels: int = 1
    base_channels: int = 16
    depth: int = 4
    num_classes: int = 2
    dropout_rate: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.task not in ("segmentation", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        families = SEGMENTATION_FAMILIES if self.task == "segmentation" else CLASSIFIER_FAMILIES
        if self.family not in families:
            raise ConfigError(f"family {self.family!r} is not valid for task {self.task!r}; expected one of {families}")
        if self.base_channels < 1 or self.depth < 1 or self.input_channels < 1:
            raise ConfigError("base_channels, depth and input_channels must all be >= 1")
        step = 2**self.depth
        h, w = self.input_size
        if h % step or w % step:
            raise ConfigError(f"input size {h}x{w} is not divisible by 2**depth = {step}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigError("classification needs num_classes >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "input_size": tuple(d["input_size"])})


@dataclass
class TrainSchedule:
    max_epochs: int = 50
    batch_size: int = 32
    patience: int = 5
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience must lie in [1, max_epochs={self.max_epochs}], got {self.patience}")

    @classmethod
    def segmentation(cls, **kw) -> "TrainSchedule":
        return cls(**{"max_epochs": 50, **kw})

    @classmethod
    def classification(cls, **kw) -> "TrainSchedule":
        return cls(**{"max_epochs": 15, **kw})


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

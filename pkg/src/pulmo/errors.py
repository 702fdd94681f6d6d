"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented process exit statuses without a lookup table.
"""


class PulmoError(Exception):
    exit_code = 1


class UsageError(PulmoError, ValueError):
    exit_code = 2


class ConfigError(PulmoError, ValueError):
    exit_code = 2


class DimensionError(PulmoError, ValueError):
    exit_code = 3


class FormatError(PulmoError, ValueError):
    """Malformed PGM/PPM payload; ``offset`` is the byte position of the fault."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(PulmoError, ValueError):
    exit_code = 3


class CheckpointError(PulmoError, ValueError):
    exit_code = 5


class MissingArtifactError(PulmoError, FileNotFoundError):
    exit_code = 5


class NonFiniteError(PulmoError, FloatingPointError):
    exit_code = 4


class DivergenceError(PulmoError, FloatingPointError):
    exit_code = 4

    def __init__(self, epoch, batch, detail=""):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch
        self.batch = batch


class OptimizerError(PulmoError, RuntimeError):
    pass


class TapeError(PulmoError, RuntimeError):
    pass


class LayerLookupError(PulmoError, KeyError):
    def __init__(self, layer_id, valid):
        super().__init__(f"unknown layer id {layer_id!r}; valid ids: {', '.join(valid)}")
        self.layer_id = layer_id
        self.valid = list(valid)

    def __str__(self):
        return self.args[0]


class TaskMismatchError(PulmoError, ValueError):
    exit_code = 2


class EmptyCamError(PulmoError, ValueError):
    pass


class UndefinedMetricError(PulmoError, ValueError):
    pass

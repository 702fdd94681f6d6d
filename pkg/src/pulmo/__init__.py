"""Lung segmentation and TB classification on a small numpy autodiff engine."""
from .errors import PulmoError

__version__ = "0.1.0"

__all__ = ["PulmoError", "__version__"]

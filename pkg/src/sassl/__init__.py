"""Stain-adversarial self-supervised learning on synthetic histology patches.

A desk-scale lab: a deterministic autodiff engine, a two-dye synthetic
patch renderer, contrastive and predictive pretraining frameworks, an
adversarial stain discriminator, dual-encoder transfer, and the metrics
to judge all of it. Everything runs on CPU in float64 and reproduces
bit for bit from a seed.
"""

__version__ = "0.1.0"

from .autodiff import SGD, Tape, Tensor, backward
from .errors import ConfigError, DataError, NumericError, SasslError, ShapeError

__all__ = [
    "SGD", "Tape", "Tensor", "backward",
    "SasslError", "ConfigError", "DataError", "NumericError", "ShapeError",
    "__version__",
]

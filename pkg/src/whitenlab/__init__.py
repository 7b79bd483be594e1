"""Batch standardization and whitening layers with analytic backward passes,
plus tooling to study the stochastic disturbance and conditioning they
induce on mini-batches."""

from . import data, linalg, normlayers, stochastic, train
from .errors import InputError, NumericError, WhitenlabError
from .normlayers import NormConfig

__version__ = "0.1.0"

__all__ = [
    "data",
    "linalg",
    "normlayers",
    "stochastic",
    "train",
    "InputError",
    "NumericError",
    "WhitenlabError",
    "NormConfig",
    "__version__",
]

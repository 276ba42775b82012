"""invarilab: seen/unseen-transformed training and neuron-level invariance analysis on a numpy convnet."""

__version__ = "0.1.0"

from .errors import (CalibrationError, ConfigError, FormatError, InputError, InvarilabError, LineageError,
                     NumericError, ParseError, TrainingError)

__all__ = ["__version__", "CalibrationError", "ConfigError", "FormatError", "InputError", "InvarilabError",
           "LineageError", "NumericError", "ParseError", "TrainingError"]

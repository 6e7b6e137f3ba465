"""Spatial-temporal normality learning for multivariate time-series anomaly detection.

The pipeline: slice a series into sliding windows, split each window into
short sub-sequences, and train a GRU encoder on two pretext tasks (predicting
the original order of shuffled sub-sequences, and distilling pairwise window
distances from a frozen random projector).  At test time the prediction
discrepancies of both tasks become per-timestamp anomaly scores.
"""

__version__ = "0.1.0"


class StenError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StenError):
    """Invalid configuration or command-line usage."""


class DataError(StenError):
    """Malformed input data, files, or shape mismatches."""


class NumericError(StenError):
    """Non-finite values encountered where finite ones are required."""

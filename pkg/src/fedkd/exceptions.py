"""Exception hierarchy shared by every fedkd subsystem."""


class FedKDError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FedKDError, ValueError):
    """A tensor or layer shape is inconsistent.

    ``layer`` names the offending layer when one is known.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class NonFiniteError(FedKDError, FloatingPointError):
    """A NaN or Inf showed up in an activation, loss or gradient."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class DatasetFormatError(FedKDError, ValueError):
    """A dataset file could not be parsed."""


class PartitionError(FedKDError, ValueError):
    """A split or client partition cannot be constructed."""


class ConfigError(FedKDError, ValueError):
    """An experiment configuration is invalid."""


class InvariantError(FedKDError, AssertionError):
    """A protocol invariant checked in test mode was violated."""

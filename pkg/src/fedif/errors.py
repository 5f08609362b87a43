"""Exception hierarchy shared across the simulator."""


class FedIFError(Exception):
    """Base class for all simulator errors."""


class ShapeError(FedIFError, ValueError):
    pass


class NumericError(FedIFError, FloatingPointError):
    pass


class FormatError(FedIFError, ValueError):
    """A dataset file does not match its binary format."""


class PartitionError(FedIFError, RuntimeError):
    pass


class AttackError(FedIFError, ValueError):
    pass


class ValuationError(FedIFError, ValueError):
    pass


class AggregationError(FedIFError, ValueError):
    pass


class ConfigError(FedIFError, ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DatasetMissingError(FedIFError, FileNotFoundError):
    pass

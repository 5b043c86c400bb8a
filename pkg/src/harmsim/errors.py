"""Exception types shared across the simulator."""


class HarmsimError(Exception):
    """Base class for every error raised by harmsim."""


class DimensionError(HarmsimError, ValueError):
    """Array shapes do not conform."""


class InsufficientDataError(HarmsimError, ValueError):
    """Too few rows to compute a statistic."""


class ProtocolError(HarmsimError, RuntimeError):
    """The federation was driven into an invalid state."""


class DivergenceError(HarmsimError, ArithmeticError):
    """A loss became NaN or infinite during training."""


class OracleError(HarmsimError, ArithmeticError):
    """A finite-difference oracle evaluated to a non-finite value."""


class ConfigError(HarmsimError, ValueError):
    """A run configuration failed validation."""


class ParseError(HarmsimError, ValueError):
    """An input file could not be parsed."""

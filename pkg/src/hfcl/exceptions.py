class HFCLError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(HFCLError, ValueError):
    """Invalid configuration, dimension mismatch or violated precondition."""


class NumericError(HFCLError, ArithmeticError):
    """Non-finite values produced during a computation."""


class DegenerateModelError(NumericError):
    """A zero parameter vector where a nonzero one is required."""


class DataFormatError(HFCLError, ValueError):
    """Malformed input file."""

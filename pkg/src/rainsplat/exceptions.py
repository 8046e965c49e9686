"""Exception types shared across rainsplat."""


class RainsplatError(Exception):
    """Base class for all rainsplat errors."""


class DataError(RainsplatError, ValueError):
    """Malformed, inconsistent or insufficient input data."""


class NumericalError(RainsplatError, ArithmeticError):
    """A linear system, loss or render could not be evaluated reliably."""

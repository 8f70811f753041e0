"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, data/format
errors -> 2, numeric failures -> 3.
"""


class DvamError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(DvamError, ValueError):
    """A caller broke a documented precondition."""


class GraphError(DvamError, RuntimeError):
    """The autodiff graph is malformed (foreign node, non-scalar loss...)."""


class NumericError(DvamError, ArithmeticError):
    """Non-finite values or other numeric breakdown."""


class DataFormatError(DvamError, ValueError):
    """Corrupt or unparseable external data (corpora, configs, checkpoints)."""

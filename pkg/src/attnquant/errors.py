"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: usage errors are handled by
click itself (exit 2), DataError exits 3, NumericalError exits 4.
"""


class AttnQuantError(Exception):
    """Base class for all toolkit errors."""


class DataError(AttnQuantError):
    """Malformed input: bad files, shape mismatches, empty calibration sets."""


class NumericalError(AttnQuantError):
    """Numerical contract violation: asymmetry, indefiniteness, NaN/Inf."""


class SizeBudgetError(NumericalError):
    """A dense intermediate (e.g. an explicit Kronecker product) would
    exceed the caller-declared element budget."""

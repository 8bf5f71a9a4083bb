"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: DataError -> 2, NumericError -> 3.
"""


class FacellsKitError(Exception):
    """Base class for all toolkit errors."""


class DataError(FacellsKitError):
    """Invalid or inconsistent input data (bad file, bad sequence, bad index)."""


class NumericError(FacellsKitError):
    """Numerical failure: NaN/Inf losses, violated numeric invariants."""

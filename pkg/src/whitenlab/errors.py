"""Exception hierarchy shared by all modules.

InputError covers malformed arguments and files (CLI exit code 2);
NumericError covers failures of the numerics themselves (CLI exit code 3).
"""


class WhitenlabError(Exception):
    pass


class InputError(WhitenlabError):
    """Bad shapes, non-finite data, malformed files or configs."""


class NumericError(WhitenlabError):
    """Numerical failure: divergence, singular/degenerate spectra, zero variance."""

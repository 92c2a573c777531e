"""Exception types shared by every module.

Two families exist because the CLI maps them to different exit codes:
contract/input violations exit with 2, numerical degeneracies with 3.
"""


class SymregError(Exception):
    """Base class; ``code`` is a short machine-readable tag."""

    exit_code = 1

    def __init__(self, message: str, code: str = "error"):
        super().__init__(message)
        self.code = code


class InputError(SymregError, ValueError):
    """Bad parameters, malformed files or violated preconditions."""

    exit_code = 2


class FormatError(InputError):
    """A file on disk does not follow its declared format."""


class DegeneracyError(SymregError, ArithmeticError):
    """The input is legal but numerically degenerate (collinear points, empty clusters...)."""

    exit_code = 3

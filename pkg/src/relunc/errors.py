"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class RelUncError(Exception):
    exit_code = 1


class InputError(RelUncError, ValueError):
    """Malformed or out-of-range input data."""

    exit_code = 1


class ParameterError(InputError):
    """A hyperparameter outside its admissible range."""


class DegenerateInputError(InputError):
    """Input is well-formed but too degenerate to fit on (e.g. an empty group)."""


class ProtocolError(RelUncError):
    """Evaluation protocol violated, e.g. tuning and evaluation samples overlap."""

    exit_code = 2


class NumericalError(RelUncError, ArithmeticError):
    """Non-finite values, divergence or non-convergence."""

    exit_code = 3

"""Exception hierarchy.

ValidationError means the caller handed over something malformed
(shapes, symmetry, ranges); NumericalError means the inputs were
well-formed but a solver could not produce a certified answer.
The command line maps these to exit codes 1 and 2 respectively.
"""


class UnravelOptError(Exception):
    """Base class for all package errors."""


class ValidationError(UnravelOptError, ValueError):
    """Malformed or inadmissible input."""


class NumericalError(UnravelOptError, RuntimeError):
    """A solver failed to converge or to certify its result."""

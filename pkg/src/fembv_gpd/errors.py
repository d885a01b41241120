"""Exception hierarchy.

Input problems (bad CSV, inconsistent panels, invalid arguments) raise
:class:`DataError`; numerical failures during fitting raise
:class:`NumericalError` or one of its subclasses. The CLI maps the two
families to exit codes 2 and 3.
"""


class FembvError(Exception):
    """Base class for all package errors."""


class DataError(FembvError, ValueError):
    """Invalid or inconsistent input data."""


class NumericalError(FembvError, ArithmeticError):
    """Optimization or numerical evaluation failed."""


class InfeasiblePointError(NumericalError):
    """An excess has infinite loss under every regime."""

    def __init__(self, location, time):
        self.location = location
        self.time = time
        super().__init__(
            f"point infeasible under every regime at location={location!r}, time={time}"
        )

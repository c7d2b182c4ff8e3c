"""Exception hierarchy.

Errors fall in three families that the command line maps onto distinct exit
codes: configuration/usage problems, data validation problems and numerical
failures.
"""


class ICMSMError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ICMSMError, ValueError):
    """Invalid estimator configuration or incompatible options."""


class GraphError(ICMSMError, ValueError):
    """Invalid multi-state model structure."""


class CycleError(GraphError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        path = "->".join(str(s) for s in self.cycle)
        super().__init__(f"transition graph contains a directed cycle: {path}")


class InvalidStateError(GraphError):
    pass


class SelfLoopError(GraphError):
    pass


class DataError(ICMSMError, ValueError):
    """Panel data that cannot be used for estimation."""


class UnreachableObservationError(DataError):
    def __init__(self, message, subject=None, pair=None):
        self.subject = subject
        self.pair = pair
        super().__init__(message)


class DuplicateTimeError(DataError):
    pass


class SingleObservationError(DataError):
    def __init__(self, ids):
        self.ids = list(ids)
        super().__init__(
            "subjects with a single observation cannot contribute an interval: "
            + ", ".join(str(i) for i in self.ids))


class InvalidSpecError(ConfigurationError):
    """Invalid simulation scenario."""


class ShapeMismatchError(ICMSMError, ValueError):
    pass


class NumericalError(ICMSMError, ArithmeticError):
    """Numerical failure during estimation."""

    iteration = None


class InfeasibleEstimateError(NumericalError):
    pass


class ZeroDenominatorError(NumericalError):
    def __init__(self, subject, interval, value):
        self.subject = subject
        self.interval = interval
        self.value = value
        lo, hi = interval
        super().__init__(
            f"zero probability for subject {subject!r} on observation interval "
            f"({lo}, {hi}] under the current estimate (value {value:.3g})")


class NonFiniteLoglikError(NumericalError):
    pass


class SingularMStepError(NumericalError):
    def __init__(self, message, state=None, bin=None):
        self.state = state
        self.bin = bin
        super().__init__(message)


class EmptyRiskSetError(NumericalError):
    def __init__(self, bin):
        self.bin = bin
        super().__init__(f"bin {bin} has expected latent counts but no subject at risk")


class MaxIterationsError(ICMSMError):
    """Raised on request when the iteration budget is exhausted."""

    def __init__(self, result):
        self.result = result
        super().__init__(f"no convergence after {result.iterations} iterations")

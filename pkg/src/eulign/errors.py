"""Exception hierarchy shared by all eulign modules."""


class EulignError(Exception):
    """Base class for all errors raised by eulign."""


class PreconditionError(EulignError, ValueError):
    pass


class DomainError(EulignError, ValueError):
    pass


class ArgumentError(EulignError, ValueError):
    pass


class ConfigError(EulignError, ValueError):
    pass


class SingularityError(EulignError, ArithmeticError):
    """Two particles closer than the coincidence guard."""

    def __init__(self, i, j, r):
        super().__init__(f"coincident particles {i} and {j} (r={r:.3e})")
        self.pair = (i, j)
        self.distance = r


class StepSizeError(EulignError, ValueError):
    pass


class SolverError(EulignError, RuntimeError):
    pass

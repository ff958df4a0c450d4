"""Exception hierarchy shared by all hygrohom modules."""


class HygrohomError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(HygrohomError, ValueError):
    """Invalid geometry, grid, time-stepping or CLI configuration."""

    def __init__(self, message, pointer=None):
        self.pointer = pointer
        if pointer is not None:
            message = f"{pointer}: {message}"
        super().__init__(message)


class AssemblyError(HygrohomError, ValueError):
    """Finite-element assembly received inadmissible data."""


class SolverError(HygrohomError, RuntimeError):
    """A linear or nonlinear iteration failed to reach its tolerance."""

    def __init__(self, message, residual_history=()):
        super().__init__(message)
        self.residual_history = list(residual_history)


class ExtrapolationError(HygrohomError, ValueError):
    """A tabulated map was queried outside of its tabulated range."""


class AssumptionViolation(HygrohomError):
    """Material laws or constants violate the structural hypotheses."""

    def __init__(self, report):
        self.report = report
        failed = [c for c in report.checks if not c.passed]
        names = ", ".join(f"({c.assumption}) {c.name}" for c in failed)
        super().__init__(f"assumption check failed: {names}")

    @property
    def failed(self):
        return [c for c in self.report.checks if not c.passed]


class StepFailure(SolverError):
    """One time step of the coupled scheme could not be completed."""

    def __init__(self, message, step, residual_history=(), trajectory=None):
        super().__init__(message, residual_history)
        self.step = step
        self.trajectory = trajectory


class PecletError(SolverError):
    """Element Peclet number exceeded the admissible bound."""


class OutputError(HygrohomError, OSError):
    """An output file could not be written."""

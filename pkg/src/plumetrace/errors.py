"""Exception hierarchy.

The CLI maps the three top-level families onto exit codes:
``InputError`` -> 2, ``NumericalError`` -> 3, ``InferenceError`` -> 4.
"""


class PlumeTraceError(Exception):
    """Base class for all package errors."""


class InputError(PlumeTraceError, ValueError):
    """Bad configuration, file or argument."""


class NumericalError(PlumeTraceError, ArithmeticError):
    """A solver or optimizer failed numerically."""


class InferenceError(PlumeTraceError):
    """The particle filter degenerated."""


# --- domain / ingestion -------------------------------------------------


class MalformedRow(InputError):
    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


class NonMonotonicTime(InputError):
    pass


class EmptySeries(InputError):
    pass


class EmptyWindow(InputError):
    pass


class InvalidConfig(InputError):
    pass


# --- solvers ------------------------------------------------------------


class CflViolation(NumericalError):
    def __init__(self, max_speed, dx, dt):
        self.max_speed = max_speed
        self.dx = dx
        self.dt = dt
        super().__init__(
            f"CFL violated: max speed {max_speed:.6g} m/s, dx {dx:.6g} m, "
            f"dt {dt:.6g} s (need dt <= {dx / max_speed:.6g} s)"
        )


class ProjectionDiverged(NumericalError):
    pass


class StabilityViolation(NumericalError):
    pass


# --- plume --------------------------------------------------------------


class InvalidParams(InputError):
    pass


class InsufficientData(InputError):
    pass


class DegenerateFit(NumericalError):
    pass


# --- surrogate ----------------------------------------------------------


class SamplingExhausted(InputError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, epoch, batch):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


class DivergedTraining(NumericalError):
    pass


class ModelFileError(InputError):
    pass


# --- filter -------------------------------------------------------------


class PriorUnsampleable(InputError):
    pass


class OperatorWindowMismatch(InputError):
    pass


class AllWeightsVanished(InferenceError):
    pass


class DegenerateRun(InferenceError):
    pass


class NoValidPoints(InputError):
    pass

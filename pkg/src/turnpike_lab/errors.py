"""Exception hierarchy shared by every module of the package."""


class LabError(Exception):
    """Base class for all errors raised by turnpike_lab."""


# grid
class EmptyInterior(LabError, ValueError):
    pass


class Disconnected(LabError, ValueError):
    pass


class GridMismatch(LabError, ValueError):
    pass


# spectral
class NoConvergence(LabError, RuntimeError):
    """An iteration hit its cap. ``best`` carries the best residual or history."""

    def __init__(self, message, best=None, history=None):
        super().__init__(message)
        self.best = best
        self.history = history


class Degenerate(LabError, RuntimeError):
    pass


class ZeroField(LabError, ValueError):
    pass


# bathtub
class MassOutOfRange(LabError, ValueError):
    pass


class DegenerateDistance(LabError, ValueError):
    pass


# optimizer
class EmptyBoundary(LabError, ValueError):
    pass


class DeformationEscapes(LabError, ValueError):
    pass


class AllRunsFailed(LabError, RuntimeError):
    pass


# stability
class EmptyRegistry(LabError, ValueError):
    pass


class ShellInfeasible(LabError, ValueError):
    pass


# control
class LinearSolveFailure(LabError, RuntimeError):
    pass


class LengthMismatch(LabError, ValueError):
    pass


# cli
class ConfigInvalid(LabError, ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(f"{d.path}: {d.reason}" for d in self.diagnostics))

"""Exception hierarchy shared by the simulator modules."""


class DiracFlowError(Exception):
    """Base class for all simulator errors."""


class GridError(DiracFlowError, ValueError):
    """Invalid grid parameters or mismatched field shapes."""


class GeometryError(DiracFlowError):
    """A geometric precondition on the target failed."""


class OutOfTube(GeometryError):
    """A point lies outside the tubular neighbourhood of the target."""


class BeyondInjectivity(GeometryError):
    """Two points are too far apart to be joined by a unique shortest geodesic."""


class NonTangentInput(GeometryError):
    """A vector expected to be tangent to the target is not."""


class SpectralError(DiracFlowError):
    """Failure inside an eigen- or resolvent computation."""


class SolverNoConvergence(SpectralError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ContourTouchesSpectrum(SpectralError):
    """An eigenvalue sits (numerically) on the projection contour."""


class KernelCollapsed(SpectralError):
    """The transported seed has (almost) no component in the kernel."""


class GapClosed(SpectralError):
    """Kernel dimension changed or the spectral gap shrank below half its initial value."""


class EmptyKernel(SpectralError):
    """No near-zero eigenvalue cluster exists."""


class NoContraction(DiracFlowError):
    """Picard iteration failed to contract."""


class FlowAborted(DiracFlowError):
    """A time step was rejected too many times."""


class ConfigError(DiracFlowError):
    """Configuration text failed to parse or validate.

    ``errors`` holds ``(line_number, message)`` pairs; line 0 is used for
    problems not tied to a specific line (e.g. a missing key).
    """

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(
            f"line {ln}: {msg}" if ln else msg for ln, msg in self.errors))

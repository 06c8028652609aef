"""Exception hierarchy shared by all modules."""


class LatentISPError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(LatentISPError, ValueError):
    exit_code = 2


class DimensionMismatch(LatentISPError, ValueError):
    pass


class ConfigMismatch(LatentISPError, ValueError):
    pass


class ModeMismatch(LatentISPError, ValueError):
    pass


class SurfaceError(LatentISPError):
    exit_code = 4


class NoSurface(SurfaceError):
    pass


class OpenSurface(SurfaceError):
    pass


class IrregularSurface(SurfaceError):
    pass


class DegenerateMesh(SurfaceError):
    pass


class NoConvergence(LatentISPError):
    """GMRES did not reach the requested relative residual."""

    exit_code = 3

    def __init__(self, max_iters, residual):
        super().__init__(f"GMRES failed to converge in {max_iters} iterations "
                         f"(relative residual {residual:.3e})")
        self.max_iters = max_iters
        self.residual = residual


class SeriesNotConverged(LatentISPError):
    pass


class PointInside(LatentISPError, ValueError):
    pass


class EmptyDataset(LatentISPError, ValueError):
    pass


class UnknownKind(LatentISPError, ValueError):
    pass


class NonPositiveEpsilon(LatentISPError, ValueError):
    pass


class NonPositiveN(LatentISPError, ValueError):
    pass


class NegativeDelta(LatentISPError, ValueError):
    pass

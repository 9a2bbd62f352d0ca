"""Exception hierarchy.

Every failure raised by the library derives from :class:`SemiwellError` so the
CLI can map it to an exit code. ``ConfigError`` is the only one that maps to
exit code 2; everything else is a numerical failure (exit code 3).
"""


class SemiwellError(Exception):
    """Base class for all library errors."""


class ConfigError(SemiwellError):
    pass


class NumericalError(SemiwellError):
    """Base class for failures of a numerical stage."""


# lattice_model
class NegativePotential(ConfigError):
    pass


class BadShape(ConfigError):
    pass


class NoWells(NumericalError):
    pass


class EmptySiteSet(NumericalError):
    pass


# agmon_geometry
class EmptySource(NumericalError):
    pass


class EmptyCore(NumericalError):
    pass


class BandTooNarrow(NumericalError):
    pass


class NotNormalized(NumericalError):
    pass


# spectral_core
class TooLarge(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class FactorizationSingular(NumericalError):
    pass


# resolvent_parametrix
class NearSingular(NumericalError):
    pass


class NotInGap(NumericalError):
    pass


class QuadratureNotConverged(NumericalError):
    pass


class SpectralCollision(NumericalError):
    pass


class EmptyWellSpectrum(NumericalError):
    pass


# projection_compare
class GramSingular(NumericalError):
    pass


class DimensionMismatch(NumericalError):
    pass


class ProjectionsTooFar(NumericalError):
    pass


# roe_structure
class SubspaceNotLocal(NumericalError):
    pass


class DimTooLarge(NumericalError):
    pass


class FrameMismatch(NumericalError):
    pass


# experiment_harness
class TooFewPoints(NumericalError):
    pass


class AllBelowFloor(NumericalError):
    pass

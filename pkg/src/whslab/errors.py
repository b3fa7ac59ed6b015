"""Exception types raised across the package.

Every error carries the name of the module that raised it so the CLI can
report provenance in its machine-readable error records.
"""


class WHSError(Exception):
    """Base class for all package errors."""

    module = "whslab"


# geometry
class DegenerateCritical(WHSError):
    module = "geometry"


class NonConvergence(WHSError):
    module = "geometry"


# forms
class ResolutionTooCoarse(WHSError):
    module = "forms"


# morse
class FlowStall(WHSError):
    module = "morse"


class AmbiguousCluster(WHSError):
    module = "morse"


class FrameDegeneracy(WHSError):
    module = "morse"


class BoundarySquareNonzero(WHSError):
    module = "morse"

    def __init__(self, message, pair=None, degree=None):
        super().__init__(message)
        self.pair = pair
        self.degree = degree


class MeshUnderResolved(WHSError):
    module = "morse"


class TransversalityWarning(UserWarning):
    pass


# oscillator
class TruncationWarning(UserWarning):
    pass


# spectral
class NoConvergence(WHSError):
    module = "spectral"


class GapNotOpen(WHSError):
    module = "spectral"


class SupportOverlap(WHSError):
    module = "spectral"


class RankDeficient(WHSError):
    module = "spectral"


class HypothesisViolation(WHSError):
    module = "spectral"


class ConfigError(WHSError):
    module = "cli"

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path

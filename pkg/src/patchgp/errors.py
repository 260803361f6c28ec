"""Exception types raised across the package."""


class PatchGpError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(PatchGpError):
    """Factorization failed at every jitter level."""


class NotSymmetric(PatchGpError):
    """Matrix expected to be symmetric is not."""


class DimensionMismatch(PatchGpError):
    """Operand shapes are incompatible."""


class ShapeMismatch(PatchGpError):
    """Parameter and state shapes disagree."""


class NonScalarSeed(PatchGpError):
    """backward() requires a scalar seed node."""


class PatchLargerThanImage(PatchGpError):
    """Requested patch size exceeds the image."""


class NegativeDistance(PatchGpError):
    """Squared distances must be nonnegative."""


class VariantMismatch(PatchGpError):
    """Kernel operation called with the wrong variant."""


class ChannelMismatch(PatchGpError):
    """Channel counts disagree."""


class OrbitCapExceeded(PatchGpError):
    """Orbit enumeration would exceed max_orbit."""


class BlockMismatch(PatchGpError):
    """Blocked operands disagree on block structure."""


class InsufficientPatches(PatchGpError):
    """Fewer distinct patches available than inducing points requested."""


class BadMagic(PatchGpError):
    """IDX file has an unexpected magic number."""


class TruncatedFile(PatchGpError):
    """Binary dataset file ends mid-record."""


class CountMismatch(PatchGpError):
    """Image and label counts disagree."""


class BadLabel(PatchGpError):
    """Label outside the legal range."""


class ZeroVariance(PatchGpError):
    """Normalization is undefined for constant data."""


class SnapshotVersionMismatch(PatchGpError):
    """Snapshot file has an unsupported version or is corrupt."""


class NonFiniteElbo(PatchGpError):
    """Training produced a non-finite objective.

    Carries the step index and a parameter snapshot for diagnostics.
    """

    def __init__(self, step: int, diagnostics: dict):
        super().__init__(f"non-finite ELBO at step {step}")
        self.step = step
        self.diagnostics = diagnostics

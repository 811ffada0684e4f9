"""Exception hierarchy shared across the package."""


class BatchcastError(Exception):
    """Base class for all batchcast errors."""


class NotPositiveDefinite(BatchcastError):
    """Cholesky pivot failed after jitter escalation."""


class DimensionMismatch(BatchcastError):
    """Vector/matrix dimensions do not agree."""


class ShapeMismatch(BatchcastError):
    """Array shapes do not agree with the declared model shapes."""


class InvalidLengthscale(BatchcastError):
    """Kernel lengthscale must be strictly positive."""


class WeightDimensionMismatch(BatchcastError):
    """Mixture weight vector length differs from the kernel bank size."""


class InvalidSimplex(BatchcastError):
    """Mixture weights are not on the probability simplex."""


class NonpositiveSigma(BatchcastError):
    """Scale parameter must be strictly positive."""


class EmptyWindow(BatchcastError):
    """A window must contain at least one step."""


class ParseError(BatchcastError):
    """Dataset file could not be parsed; message names the offending line."""


class NonUniformSpacing(BatchcastError):
    """Timestamps within a series are not uniformly spaced."""


class DuplicateTimestamp(BatchcastError):
    """A timestamp occurs twice within one series."""


class EmptyTrainSplit(BatchcastError):
    """Standardization requires a non-empty training split."""


class SeriesTooShort(BatchcastError):
    """Series is too short for the requested window configuration."""


class InvalidPhi(BatchcastError):
    """AR(1) coefficient must satisfy |phi| < 1."""


class HistoryTooShort(BatchcastError):
    """Observed history is too short to start forecasting."""


class DivergedLoss(BatchcastError):
    """Training loss became non-finite."""


class TooFewSamples(BatchcastError):
    """Empirical estimator needs at least two samples."""


class ZeroDenominator(BatchcastError):
    """Normalization denominator is zero."""


class LengthMismatch(BatchcastError):
    """Paired sequences differ in length."""


class InvalidConfig(BatchcastError):
    """Experiment configuration is invalid or incomplete."""


class CheckpointMismatch(BatchcastError):
    """Checkpoint is incompatible with the requested configuration."""

"""Exception types raised across flairnorm.

Every error derives from :class:`FlairNormError` so batch drivers can catch
one type and record the failure per file.
"""


class FlairNormError(Exception):
    """Base class for all flairnorm errors."""


# volume core
class DimsMismatchError(FlairNormError, ValueError):
    pass


class EmptyMaskError(FlairNormError, ValueError):
    pass


class DegenerateRangeError(FlairNormError, ValueError):
    pass


class EdgesMismatchError(FlairNormError, ValueError):
    pass


class EmptyListError(FlairNormError, ValueError):
    pass


class InvalidOverlapError(FlairNormError, ValueError):
    pass


# nifti io
class BadMagicError(FlairNormError, ValueError):
    pass


class UnsupportedDatatypeError(FlairNormError, ValueError):
    pass


class TruncatedDataError(FlairNormError, ValueError):
    pass


class NonBinaryMaskError(FlairNormError, ValueError):
    pass


class LossyDatatypeError(FlairNormError, ValueError):
    pass


# preprocess
class TooSmallError(FlairNormError, ValueError):
    pass


class NonPositiveIntensityError(FlairNormError, ValueError):
    pass


# standardize
class ZeroVarianceError(FlairNormError, ValueError):
    pass


class ModeNotFoundError(FlairNormError, ValueError):
    pass


class DegenerateHistogramError(ModeNotFoundError):
    pass


class NonPositiveModeError(FlairNormError, ValueError):
    pass


class EmptyTrainingSetError(FlairNormError, ValueError):
    pass


class NonMonotoneLandmarksError(FlairNormError, ValueError):
    pass


class ZeroSpreadError(FlairNormError, ValueError):
    pass


class MissingParamsError(FlairNormError, ValueError):
    pass


# metrics
class EmptyGroundTruthError(FlairNormError, ValueError):
    pass


class NotNormalizedError(FlairNormError, ValueError):
    pass


class EmptyInputError(FlairNormError, ValueError):
    pass


# ensemble
class TooFewMasksError(FlairNormError, ValueError):
    pass


# stats
class NonPositiveDataError(FlairNormError, ValueError):
    pass


class TooFewSamplesError(FlairNormError, ValueError):
    pass


class DegenerateDataError(TooFewSamplesError):
    """Likelihood is flat (e.g. constant data); no lambda can be fitted."""


class ZeroVarianceBothError(FlairNormError, ValueError):
    pass


class IdMismatchError(FlairNormError, ValueError):
    pass

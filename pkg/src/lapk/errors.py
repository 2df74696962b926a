"""Exception types shared across the toolkit."""


class LapkError(Exception):
    """Base class for all toolkit errors."""


class NonFiniteInputError(LapkError):
    """An input array contains NaN or infinite values."""


class DegenerateFilterError(LapkError):
    """A filter has (near-)zero total mass, so no flow can be read from it."""


class DegenerateWindowError(LapkError):
    """A local window carries no usable signal (rank-deficient normal matrix)."""


class UndefinedFrequencyError(LapkError):
    """All-pass response requested at a frequency where the backward filter vanishes."""


class InsufficientSamplesError(LapkError):
    """Too few jointly acquired k-space samples for the requested estimate."""


class AllUnreliableError(LapkError):
    """A flow field contains no reliable voxels to inpaint from."""


class UndefinedMetricError(LapkError):
    """A metric is undefined for the given inputs (e.g. zero-variance image)."""


class MaskCalibrationError(LapkError):
    """The requested acceleration factor cannot be calibrated on this grid."""


class FormatError(LapkError):
    """A file does not conform to the expected on-disk format."""

"""Exception hierarchy shared by every stage."""


class AdcdsError(Exception):
    pass


class ManifestError(AdcdsError):
    pass


class ManifestParseError(ManifestError):
    """Malformed JSON. ``offset`` is the byte offset of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(ManifestError):
    pass


class ReferentialIntegrityError(ManifestError):
    pass


class ImageFormatError(AdcdsError):
    pass


class ShapeError(AdcdsError, ValueError):
    pass


class ParameterError(AdcdsError, ValueError):
    pass


class PlacementError(AdcdsError):
    pass


class ROIError(AdcdsError):
    pass


class DegenerateROIError(ROIError):
    """Raised for ROIs that cannot yield a mask.

    ``result`` carries the empty-mask SegResult so batch callers can record
    it as a per-instance diagnostic.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class UndefinedMetricError(AdcdsError, ArithmeticError):
    pass


class ConfigError(AdcdsError, ValueError):
    pass

class ExporterError(Exception):
    """Base class for all errors raised by this package."""


class CaptureError(ExporterError):
    """A capture point could not be resolved or produced unusable output."""

"""Exception types shared across the toolkit.

Geometry errors cover shape and size violations, domain errors cover
invalid pixel values or parameters, and the remaining classes name the
specific contract that was broken so callers can map them to exit codes.
"""


class SvDeconvError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(SvDeconvError):
    """Image, kernel or grid dimensions violate an operation's contract."""


class DomainError(SvDeconvError):
    """A value is outside the operation's admissible domain."""


class ContractError(SvDeconvError):
    """Mismatched cardinalities or inconsistent companion arguments."""


class UnsupportedAberrationError(SvDeconvError):
    """Requested aberration index is beyond the supported table."""


class ModelLoadError(SvDeconvError):
    """An external inference graph could not be loaded; message names the defect."""


class BackendError(SvDeconvError):
    """A patch-estimation backend failed at runtime."""


class ExhaustionError(SvDeconvError):
    """Dataset generation could not reach the requested count; names the filter."""


class NumericalFailureError(SvDeconvError):
    """A non-finite intermediate appeared; message names the iteration."""


class UndefinedMetricError(SvDeconvError):
    """A metric is undefined for the given inputs (e.g. zero truth variance)."""


class FileFormatError(SvDeconvError):
    """A file does not conform to the expected on-disk format."""

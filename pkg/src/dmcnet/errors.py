"""Exception types raised across the package."""


class DmcError(Exception):
    """Base class for all package errors."""


class DimensionError(DmcError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class GeometryError(DmcError, ValueError):
    """Spatial extents cannot be processed (zero-size output, indivisible extent)."""


class ConfigurationError(DmcError, ValueError):
    """A block, network or run configuration is invalid."""


class ContractError(DmcError, RuntimeError):
    """An API precondition was violated by the caller."""


class DataError(DmcError, ValueError):
    """Input data (labels, spacing, volume files) is malformed."""


class FormatError(DataError):
    """A volume or checkpoint file cannot be parsed.

    ``offset`` is the byte offset in the offending file where parsing failed,
    when one is meaningful.
    """

    def __init__(self, message, path=None, offset=None):
        detail = message
        if path is not None and str(path) not in detail:
            detail = f"{path}: {detail}"
        if offset is not None:
            detail = f"{detail} (at byte offset {offset})"
        super().__init__(detail)
        self.path = path
        self.offset = offset


class NonFiniteLossError(DmcError, FloatingPointError):
    """Training produced a NaN/inf loss; ``layer`` names the first offending layer."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer

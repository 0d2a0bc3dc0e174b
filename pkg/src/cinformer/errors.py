"""Exception hierarchy shared by the whole package."""


class CINFormerError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CINFormerError, ValueError):
    """Shapes or extents are incompatible."""


class NumericError(CINFormerError, ArithmeticError):
    """A value left its numeric domain or became non-finite."""


class SelectionIndexError(CINFormerError, IndexError):
    """Out-of-range or duplicate gather/scatter index."""


class UsageError(CINFormerError, RuntimeError):
    """The API was called in an invalid state."""


class ConfigError(CINFormerError, ValueError):
    """A configuration document is invalid."""


class DataError(CINFormerError, ValueError):
    """Input data (masks, datasets) violates its contract."""


class FormatError(CINFormerError, ValueError):
    """A file does not follow its binary or text format."""


class StateError(CINFormerError, RuntimeError):
    """Optimizer state does not match the parameters it serves."""

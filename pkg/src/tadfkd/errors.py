"""Exception types raised across the toolkit."""


class TadfkdError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(TadfkdError, ValueError):
    pass


class InvalidAxis(TadfkdError, ValueError):
    pass


class NotScalar(TadfkdError, ValueError):
    pass


class BatchTooSmall(TadfkdError, ValueError):
    pass


class LayerCountMismatch(TadfkdError, ValueError):
    pass


class GridMismatch(TadfkdError, ValueError):
    pass


class EmptySelection(TadfkdError):
    """Raised when a selection mask keeps no samples."""


class DegenerateFit(TadfkdError, ValueError):
    pass


class SchemaVersionMismatch(TadfkdError, ValueError):
    pass


class ChecksumMismatch(TadfkdError, ValueError):
    pass


class KTooLarge(TadfkdError, ValueError):
    pass


class EmptyDataset(TadfkdError, ValueError):
    pass


class MissingGroup(TadfkdError, KeyError):
    pass


class InvalidSpec(TadfkdError, ValueError):
    pass

"""Exception types shared across the package."""


class MerError(Exception):
    pass


class DimensionError(MerError, ValueError):
    """Shapes disagree; the message names the offending axis."""


class NonFiniteError(MerError, ArithmeticError):
    pass


class LabelError(MerError, ValueError):
    pass


class ConfigError(MerError, ValueError):
    def __init__(self, field: str, constraint: str):
        super().__init__(f"{field}: {constraint}")
        self.field = field
        self.constraint = constraint


class IngestionError(MerError, OSError):
    def __init__(self, message: str, paths=()):
        self.paths = list(paths)
        listing = "".join(f"\n  {p}" for p in self.paths[:20])
        more = f"\n  ... and {len(self.paths) - 20} more" if len(self.paths) > 20 else ""
        super().__init__(message + listing + more)


class SplitError(MerError, ValueError):
    pass


class SamplingError(MerError, ValueError):
    pass


class NumericAbort(MerError):
    """Training hit a non-finite value; ``record`` holds the last state."""

    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record


class FormatError(MerError, ValueError):
    pass

"""Exception hierarchy shared across the package."""


class SeicError(Exception):
    """Base class for all errors raised by this package."""


class ZeroRowError(SeicError, ValueError):
    def __init__(self, row_id, norm=0.0):
        super().__init__(f"row {row_id!r} has vanishing norm ({norm:.3e})")
        self.row_id = row_id


class FormatError(SeicError, ValueError):
    pass


class DimMismatchError(SeicError, ValueError):
    pass


class EncoderError(SeicError, RuntimeError):
    def __init__(self, message, start=None, stop=None):
        if start is not None:
            message = f"{message} (batch items [{start}, {stop}))"
        super().__init__(message)
        self.start = start
        self.stop = stop


class DegenerateDataError(SeicError, ValueError):
    pass


class DegenerateColumnError(SeicError, ValueError):
    pass


class ShapeError(SeicError, ValueError):
    pass


class NonFiniteLossError(SeicError, FloatingPointError):
    def __init__(self, part, value=float("nan")):
        super().__init__(f"loss component {part!r} is not finite ({value})")
        self.part = part


class LabelRangeError(SeicError, ValueError):
    pass


class ConfigError(SeicError, ValueError):
    pass

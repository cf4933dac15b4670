"""Exception types shared across the package."""


class DisprefineError(Exception):
    """Base class for all errors raised by disprefine."""


class DimensionMismatch(DisprefineError, ValueError):
    pass


class FormatError(DisprefineError, ValueError):
    """A file could not be decoded.

    ``field`` names the header field or payload region at fault and
    ``offset`` is the byte offset where decoding stopped, when known.
    """

    def __init__(self, message, path=None, field=None, offset=None):
        self.path = path
        self.field = field
        self.offset = offset
        parts = [message]
        if field is not None:
            parts.append(f"field={field}")
        if offset is not None:
            parts.append(f"offset={offset}")
        if path is not None:
            parts.append(f"file={path}")
        super().__init__(" ".join(parts) if len(parts) > 1 else message)
        self.reason = message


class DegenerateFitError(DisprefineError, ArithmeticError):
    pass


class EmptyDomainError(DisprefineError, ValueError):
    """No jointly valid pixels to evaluate over."""


class OutOfInteriorError(DisprefineError, ValueError):
    pass

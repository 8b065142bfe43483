"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are inconsistent with each other or with the config."""


class ConfigurationError(ValueError):
    """A configuration value is outside its documented domain."""


class InputError(ValueError):
    """Runtime input (labels, ids, metadata, file contents) is invalid."""


class DegenerateInputError(ValueError):
    """An input is degenerate for the requested operation (e.g. zero vector)."""


class DegenerateTransportError(ValueError):
    """A transport problem has no mass on one side; callers must fall back."""


class FormatError(ValueError):
    """A binary file does not match its expected layout.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset

"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents are invalid or incompatible."""


class ConfigError(ValueError):
    """A network, pyramid or grid configuration is inconsistent."""


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class ParseError(ValueError):
    """A binary or text file is malformed.

    ``offset`` is the byte offset (or line number for text formats) where
    parsing failed, when known.
    """

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)

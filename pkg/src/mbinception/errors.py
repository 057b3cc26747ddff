"""Exception hierarchy shared by every module.

Each error class maps onto one CLI exit code so that the command line can
translate failures without inspecting messages.
"""


class EngineError(Exception):
    exit_code = 1


class ShapeError(EngineError, ValueError):
    """Operands have incompatible shapes."""


class DomainError(EngineError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ConfigError(EngineError, ValueError):
    exit_code = 1


class DataError(EngineError):
    """Malformed or missing dataset file.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    exit_code = 2

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))


class NumericalError(EngineError):
    exit_code = 3


class GraphError(ShapeError):
    """Shape or wiring problem attributable to a specific graph node."""

    def __init__(self, message, node_id=None):
        self.node_id = node_id
        if node_id is not None:
            message = f"node {node_id!r}: {message}"
        super().__init__(message)

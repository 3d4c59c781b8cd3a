"""Exception types shared across the package.

Every error carries a short ``code`` used by the CLI's ``ERROR:<code>:`` prefix.
"""

from __future__ import annotations


class DubflowError(Exception):
    code = "Error"


class ShapeMismatch(DubflowError, ValueError):
    code = "ShapeMismatch"


class NonFinite(DubflowError, FloatingPointError):
    code = "NonFinite"

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class NotScalar(DubflowError, ValueError):
    code = "NotScalar"


class GraphConsumed(DubflowError, RuntimeError):
    code = "GraphConsumed"


class IoFailure(DubflowError, OSError):
    code = "IoFailure"


class ParseError(DubflowError, ValueError):
    code = "ParseError"

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingPayload(DubflowError, FileNotFoundError):
    code = "MissingPayload"


class TooShort(DubflowError, ValueError):
    code = "TooShort"


class OutOfVocab(DubflowError, ValueError):
    code = "OutOfVocab"


class EmptyBatch(DubflowError, ValueError):
    code = "EmptyBatch"


class CheckpointVersionMismatch(DubflowError, ValueError):
    code = "CheckpointVersionMismatch"


class DimMismatch(DubflowError, ValueError):
    code = "DimMismatch"


class EmptyReference(DubflowError, ValueError):
    code = "EmptyReference"


class ZeroVector(DubflowError, ValueError):
    code = "ZeroVector"


class MissingGeneration(DubflowError, FileNotFoundError):
    code = "MissingGeneration"

    def __init__(self, ids: list[str]):
        super().__init__("no generated payload for: " + ", ".join(ids))
        self.ids = list(ids)


class BadFlag(DubflowError, ValueError):
    code = "BadFlag"

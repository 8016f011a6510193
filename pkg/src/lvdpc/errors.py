"""Exception types raised across the package."""


class CircuitError(Exception):
    """Base class for circuit-related failures."""


class DomainError(CircuitError, ValueError):
    """An observed value lies outside its variable's domain."""


class StructureError(CircuitError):
    """A circuit is not smooth, decomposable or alternating where required."""


class ParseError(CircuitError):
    """A serialized artifact is malformed.

    ``offset`` is the byte offset of the offending line, ``line`` its
    1-based line number.
    """

    def __init__(self, message, offset=None, line=None):
        self.offset = offset
        self.line = line
        where = ""
        if line is not None and offset is not None:
            where = f" (line {line}, offset {offset})"
        elif line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (offset {offset})"
        super().__init__(message + where)


class ZeroProbabilityError(CircuitError, ArithmeticError):
    """A sample has zero likelihood under its labeled head."""

    def __init__(self, sample_index, head):
        self.sample_index = sample_index
        self.head = head
        super().__init__(
            f"sample {sample_index} has zero probability under head {head}; "
            "apply leaf smoothing"
        )

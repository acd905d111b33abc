"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the named operation."""

    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class TrainingError(RuntimeError):
    """Optimisation diverged or produced non-finite values."""


class ParseError(ValueError):
    """Malformed input file; carries the byte offset or line of the fault."""

    def __init__(self, message: str, *, offset: int | None = None, line: int | None = None):
        self.message = message
        self.offset = offset
        self.line = line
        where = []
        if offset is not None:
            where.append(f"byte {offset}")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" (at {', '.join(where)})" if where else ""
        super().__init__(message + suffix)

"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition on arguments was violated."""


class EmptySequenceError(ContractError):
    """A token/segment sequence of length zero was supplied."""


class DegenerateBatchError(ContractError):
    """Batch statistics were requested for a batch of a single row."""


class VocabularyError(ContractError):
    """A token id falls outside the embedding table."""


class FormatError(ValueError):
    """A binary or text file does not match the expected layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss

"""Exception hierarchy shared across the package.

Everything derives from ``CrossviError`` so callers can catch broadly;
the validation-type errors also subclass ``ValueError`` for ergonomics.
"""


class CrossviError(Exception):
    """Base class for all package errors."""


class DomainError(CrossviError, ValueError):
    """A distribution or model parameter is outside its valid domain."""


class DegenerateMassError(DomainError):
    """Renormalization target carries (numerically) zero probability mass."""


class ContractError(CrossviError, ValueError):
    """An API precondition was violated (shape mismatch, bad call order)."""


class DataError(CrossviError, ValueError):
    """Input data is inconsistent (negative counts, gene set mismatch)."""


class ParseError(DataError):
    """A count file could not be parsed; carries the offending line."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" [{loc}]"
        super().__init__(f"{message}{loc}")
        self.path = path
        self.line = line


class AlignmentError(DataError):
    """Gene identifiers could not be matched across datasets."""


class TrainingDivergedError(CrossviError, RuntimeError):
    """Training produced a non-finite loss; carries the epoch index."""

    def __init__(self, epoch, message="non-finite training loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch

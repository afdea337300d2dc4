"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DivergenceError and
NumericalError -> 3, everything else derived from SgaError -> 4.
"""


class SgaError(Exception):
    """Base class for all package errors."""


class ShapeError(SgaError):
    """Array shapes or divisibility constraints violated."""


class DegenerateRowError(SgaError):
    """A softmax row had every entry masked out."""


class VocabularyError(SgaError):
    """A token index fell outside its embedding table."""


class SequenceError(SgaError):
    """Decoder input sequence malformed (e.g. START not at position 0)."""


class ParameterError(SgaError):
    """A numeric parameter was out of its legal range."""


class InsufficientDataError(SgaError):
    """Not enough distinct samples to fit the requested codebook."""


class IncompleteGridError(SgaError):
    """A token grid still contains MASK entries where none are allowed."""


class ValidationError(SgaError):
    """An input failed a documented invariant (e.g. non-stochastic rows)."""


class ConfigError(SgaError):
    """Bad or inconsistent run configuration."""


class NumericalError(SgaError):
    """A computation produced non-finite values."""


class DivergenceError(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")

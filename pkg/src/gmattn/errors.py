"""Exception types shared across the package."""


class GmattnError(Exception):
    """Base class for all package errors."""


class DimensionError(GmattnError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(GmattnError, ValueError):
    """A documented precondition was violated."""


class GradientStateError(GmattnError, RuntimeError):
    """backward() called while leaf gradients are still populated."""


class EvaluationError(GmattnError, ArithmeticError):
    """A function produced a non-finite value where a finite one is required."""


class DegenerateDistributionError(GmattnError, ArithmeticError):
    """A row that must be renormalized has (numerically) zero mass."""


class VocabError(GmattnError, IndexError):
    """Token id outside the vocabulary."""


class SpecError(GmattnError, ValueError):
    """A synthetic task specification cannot be realized."""


class AlignmentParseError(GmattnError, ValueError):
    """Malformed Pharaoh alignment line."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DivergenceError(GmattnError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class ConfigError(GmattnError, ValueError):
    """Invalid run configuration."""

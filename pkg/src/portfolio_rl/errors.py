"""Exception types shared across the package."""


class PortfolioError(Exception):
    """Base class for all package errors."""


class ValidationError(PortfolioError, ValueError):
    """Input violates a documented invariant."""


class ParseError(PortfolioError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionError(ValidationError):
    pass


class RankError(PortfolioError, ArithmeticError):
    """Linear system is singular or rank deficient."""


class DegeneracyError(PortfolioError, ArithmeticError):
    """Problem is degenerate (e.g. mean vector proportional to ones)."""


class InfeasibleError(PortfolioError, ValueError):
    """No feasible point satisfies the constraints."""


class UndefinedSharpeError(PortfolioError, ArithmeticError):
    """Sharpe ratio requested for a zero-variance sample."""


class ZeroVarianceError(PortfolioError, ArithmeticError):
    """Variance estimate fell below the numerical floor."""


class UnfittedModelError(PortfolioError, RuntimeError):
    pass


class ShapeError(PortfolioError, ValueError):
    """Tensor shapes are incompatible; names the offending layer."""

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"[{layer}] {message}"
        super().__init__(message)


class TrainingDivergedError(PortfolioError, FloatingPointError):
    pass


class ConfigError(PortfolioError, ValueError):
    """Invalid experiment configuration."""

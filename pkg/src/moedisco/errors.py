"""Exception hierarchy shared across the package."""


class DiscoError(Exception):
    """Base class for all package errors."""


class ShapeError(DiscoError, ValueError):
    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class GraphError(DiscoError, RuntimeError):
    """Cycle or unsupported node in an autodiff graph."""


class DomainError(DiscoError, ValueError):
    """Argument outside the domain of an operation."""


class InputError(DiscoError, ValueError):
    """Malformed user input (token ids, corpora, too few points, ...)."""


class SchemaError(DiscoError, ValueError):
    """Parameter containers whose paths or shapes disagree."""


class AssemblyError(DiscoError, ValueError):
    """Missing or duplicated expert slots while merging."""


class ConfigError(DiscoError, ValueError):
    pass


class NumericalError(DiscoError, FloatingPointError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message: str, **context):
        self.context = context
        super().__init__(message)

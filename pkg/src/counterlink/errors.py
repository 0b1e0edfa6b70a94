"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class CounterlinkError(Exception):
    """Base class; exit_code is what the CLI returns when this escapes."""

    exit_code = 1


class InputError(CounterlinkError, ValueError):
    exit_code = 2


class ShapeError(InputError):
    """Shape mismatch inside a numeric op; carries the op name."""

    def __init__(self, op, message):
        super().__init__(f"{op}: {message}")
        self.op = op


class ConfigError(CounterlinkError):
    exit_code = 2


class DependencyError(CounterlinkError):
    exit_code = 3


class NumericError(CounterlinkError):
    exit_code = 4


class ValidationError(CounterlinkError):
    exit_code = 5


class DegenerateSplitError(ValidationError):
    """A split bucket received zero edges; names the empty bucket."""

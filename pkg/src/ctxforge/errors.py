"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 2, data and
validation problems exit 3, numeric guards exit 4.
"""


class ForgeError(Exception):
    """Base class for all package errors."""


class UsageError(ForgeError):
    """Bad invocation: missing flags, contradictory modes."""


class ValidationError(ForgeError):
    """Malformed or inconsistent data: parse failures, invariant violations."""


class NumericGuardError(ForgeError):
    """A numeric safety check tripped (e.g. quality overflow)."""


class RuleSyntaxError(ValidationError):
    """Located syntax error in a rule string."""

    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        detail = f"byte {offset}: {message}"
        if expected:
            detail += " (expected " + ", ".join(expected) + ")"
        super().__init__(detail)
        self.offset = offset
        self.expected = expected


class RuleScopeError(ValidationError):
    """Structurally valid rule using a construct outside its legal scope."""

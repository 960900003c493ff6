"""Exception types shared across the package."""


class RinetError(Exception):
    """Base class for all package errors."""


class ShapeError(RinetError):
    """Operand dimensions are incompatible with the requested operation."""


class DomainError(RinetError):
    """A value is outside the operation's admissible domain."""


class StateError(RinetError):
    """An object is used in a state it was not produced for (stale cache,
    missing cell state, mismatched trace)."""


class ConfigError(RinetError):
    """Invalid configuration value or missing required setting."""


class FormatError(RinetError):
    """A serialized file is malformed (bad magic, truncated payload)."""

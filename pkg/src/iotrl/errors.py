"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """A value is outside the mathematical domain of an operation."""


class SchemaError(ValueError):
    """Data does not match the declared sensor/feature schema."""


class ConfigError(ValueError):
    """A configuration is invalid; the message lists the violations."""


class UsageError(RuntimeError):
    """An API was called in a state or with arguments it does not support."""

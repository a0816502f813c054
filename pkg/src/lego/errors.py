"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class ShapeError(ValueError):
    """Tensor shape does not match the expected layout."""


class NumericError(RuntimeError):
    """Non-finite value encountered; carries the location where it arose."""

    def __init__(self, message, **context):
        self.context = dict(context)
        if context:
            message = f"{message} ({', '.join(f'{k}={v}' for k, v in context.items())})"
        super().__init__(message)

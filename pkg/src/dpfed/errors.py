"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (bad bounds, mismatched sizes, ...)."""


class ShapeMismatchError(ValueError):
    """Arithmetic attempted between parameter vectors with different layouts."""


class CorruptUpdateError(ValueError):
    """An update contained non-finite entries and cannot be trusted."""

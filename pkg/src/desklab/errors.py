"""Shared exception types."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ConfigError(ValueError):
    """A configuration value violates its invariants."""


class GroupingError(KeyError):
    """A parameter could not be assigned to a parameter group."""


class ScheduleError(ValueError):
    """A step or transition is inconsistent with the phase plan."""


class NonFiniteError(FloatingPointError):
    """A forward op produced a non-finite value from finite inputs."""

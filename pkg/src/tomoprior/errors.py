"""Exception types shared across the toolkit."""


class TomopriorError(Exception):
    """Base class for toolkit errors."""


class NumericFaultError(TomopriorError):
    """A forward evaluation produced NaN/Inf; message names the offending node."""


class TrainingDivergenceError(TomopriorError):
    """An optimization loop produced a non-finite loss; message carries the iteration index."""


class ScheduleMismatchError(TomopriorError):
    """Checkpoint-embedded noise schedule disagrees with the requested one."""


class DataMismatchError(TomopriorError):
    """Shapes/geometry of supplied data do not line up."""


class ConfigError(TomopriorError):
    """Bad or unknown configuration key/value."""

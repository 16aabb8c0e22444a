"""Exception hierarchy. The CLI maps these onto exit codes."""


class DmpoLabError(Exception):
    pass


class ConfigError(DmpoLabError):
    """Inconsistent configuration, e.g. a policy whose shape does not fit the MDP."""


class ValidationError(DmpoLabError, ValueError):
    """An argument is outside its documented domain."""


class UpdateRefusedError(DmpoLabError):
    """Attempt to differentiate or update a frozen policy."""


class SupportMismatchError(DmpoLabError, ValueError):
    """A log-ratio was requested where a measure has zero mass."""


class GenerationExhaustedError(DmpoLabError):
    """Rejection sampling could not produce the requested data."""

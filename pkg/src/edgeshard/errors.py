"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised when a model/train/fleet/scenario configuration is invalid."""


class InfeasibleError(RuntimeError):
    """Raised when a workload cannot be placed on the fleet at all.

    Carries the DAG level index when the failure occurred inside a
    multi-level solve, so callers can report which level broke.
    """

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level

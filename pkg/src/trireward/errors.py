"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument or call violates a documented precondition."""


class ConfigError(RuntimeError):
    """Inconsistent configuration or mismatched artifact provenance."""


class TrainingError(RuntimeError):
    """Training diverged or collapsed (NaN losses, pinned discriminators, ...)."""

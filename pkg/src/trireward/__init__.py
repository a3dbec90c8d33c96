"""Multi-level sequential reward modeling and shaping for task-oriented dialog RL."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractViolation, TrainingError

__all__ = ["ConfigError", "ContractViolation", "TrainingError", "__version__"]

"""Exception types shared across the package."""


class ContractError(ValueError):
    """Inputs violate a shape or value precondition."""


class ParameterError(ValueError):
    """Physical model parameters are invalid (e.g. non-positive mass)."""


class DynamicsError(RuntimeError):
    """Dynamics evaluation failed (singular mass matrix)."""


class IntegrationOverflowError(DynamicsError):
    """Integration produced non-finite values."""


class ConfigError(ValueError):
    """Run configuration failed schema validation."""


class IncompatibleError(ValueError):
    """Checkpoint, dataset and config do not belong together."""


class TrainingFailure(RuntimeError):
    """Training diverged; ``params`` holds the last finite parameters."""

    def __init__(self, message, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = history

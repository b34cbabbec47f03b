"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value is missing, unknown, or out of range.

    ``key`` is the dotted path of the offending field (e.g. ``env.rho_t``).
    """

    def __init__(self, key: str, message: str):
        self.key = key
        self.message = message
        super().__init__(f"{key}: {message}")


class ExperimentError(RuntimeError):
    """A scenario run failed; carries the epoch and phase where it died."""

    def __init__(self, epoch: int, phase: str, message: str):
        self.epoch = epoch
        self.phase = phase
        super().__init__(f"epoch {epoch}, phase {phase}: {message}")

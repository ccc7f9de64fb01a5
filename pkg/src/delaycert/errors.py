"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid system, constant, or config setting."""


class DimensionError(ValueError):
    """Array with the wrong length for a given agent and field."""

    def __init__(self, agent, field, expected, got):
        self.agent = agent
        self.field = field
        self.expected = expected
        self.got = got
        super().__init__(f"agent {agent}: {field} has length {got}, expected {expected}")


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class CertificateFormatError(ValueError):
    """Certificate file is malformed or inconsistent."""

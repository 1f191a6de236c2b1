class ConfigError(ValueError):
    """Invalid configuration or parameter range."""


class ContractError(RuntimeError):
    """A caller broke a documented precondition."""


class SchemaError(ValueError):
    """Malformed instance, family definition or file schema."""


class SolverError(RuntimeError):
    """The LP solver did not reach an optimal basis."""

    def __init__(self, status, message=""):
        super().__init__(message or status)
        self.status = status


class TerminalStateError(ContractError):
    """Raised when a decision is requested on a terminal state."""


class UpstreamMissingError(FileNotFoundError):
    """A pipeline stage could not find the artifact it depends on."""

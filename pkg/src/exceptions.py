"""Error hierarchy shared by every workbench component."""


class WorkbenchError(Exception):
    """Base class for workbench errors. `exit_code` is what the CLI returns."""
    exit_code = 3


class ConfigurationError(WorkbenchError):
    """Invalid configuration, manifest, corpus or usage."""
    exit_code = 2


class DomainError(WorkbenchError, ValueError):
    """Input outside an operation's mathematical domain."""
    exit_code = 3


class StateError(WorkbenchError):
    """Operation requires state that is missing (checkpoint, clean output, prompt perturbation)."""
    exit_code = 3


class StoreError(WorkbenchError):
    """Reading or writing persisted artifacts failed."""
    exit_code = 4

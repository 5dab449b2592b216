"""Exception types shared across the toolkit."""


class SctForgeError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(SctForgeError, ValueError):
    """An argument is outside its valid domain."""


class IntegrityError(SctForgeError):
    """Stored data is inconsistent, truncated or fails a digest check."""


class LoadError(SctForgeError, OSError):
    """A required file is missing or unreadable."""


class ContractError(SctForgeError):
    """A caller broke an input contract (e.g. unpadded generator input)."""


class CheckpointNotFound(SctForgeError, LookupError):
    """No checkpoint is stored under the requested key."""


class TrainingError(SctForgeError, RuntimeError):
    """Training produced a non-finite loss or otherwise diverged."""


class ExportError(SctForgeError, OSError):
    """Writing an export artifact failed."""

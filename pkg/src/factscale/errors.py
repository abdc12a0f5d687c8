"""Exception types shared across the toolkit."""


class FactscaleError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FactscaleError):
    """Invalid or incomplete configuration (missing endpoint, env var, ...)."""


class PreconditionError(FactscaleError, ValueError):
    """An operation was called with arguments violating its contract."""


class DatasetFormatError(FactscaleError):
    """A dataset file or record does not match the expected schema."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"field {field!r}: "
        super().__init__(prefix + message)


class DuplicateIdError(DatasetFormatError):
    """Two records share an id within the same (dataset, split)."""


class TransportError(FactscaleError):
    """HTTP-level failure talking to a remote endpoint."""

    def __init__(self, message: str, *, status: int | None = None, retryable: bool = False):
        self.status = status
        self.retryable = retryable
        super().__init__(message)


class AuthError(TransportError):
    """Authentication or authorization failure (never retried)."""

    def __init__(self, message: str, *, status: int | None = None):
        super().__init__(message, status=status, retryable=False)


class ContextOverflowError(TransportError):
    """The prompt exceeded the backend's context window (never retried)."""

    def __init__(self, message: str, *, status: int | None = None):
        super().__init__(message, status=status, retryable=False)


class ResponseParseError(FactscaleError):
    """A remote endpoint returned a body we could not interpret."""


class CapabilityError(FactscaleError):
    """An endpoint lacks a capability required by the requested operation."""


class StoreError(FactscaleError):
    """Persistence-layer failure."""


class StoreLockedError(StoreError):
    """Another live process holds the store's writer lock."""


class JoinMismatchError(FactscaleError):
    """Traces and scores could not be joined one-to-one."""

    def __init__(self, message: str, orphans: list[tuple] | None = None):
        self.orphans = orphans or []
        super().__init__(message)


class RaggedSamplesError(FactscaleError):
    """Questions in one aggregation run have differing sample counts."""

    def __init__(self, message: str, offenders: list[str] | None = None):
        self.offenders = offenders or []
        super().__init__(message)

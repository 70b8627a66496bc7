"""Exception hierarchy shared across the gateway."""

from __future__ import annotations


class BlockIoTError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(BlockIoTError, ValueError):
    pass


class UnsupportedUnitError(ValidationError):
    def __init__(self, unit: str):
        super().__init__(f"unsupported unit {unit!r}")
        self.unit = unit


class TemplateParseError(ValidationError):
    """Raised by template loading; ``problems`` lists every failing path."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems) if problems else "invalid template")
        self.problems = problems


class IdentityError(ValidationError):
    pass


class MappingError(ValidationError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


class AuthError(BlockIoTError):
    """Unknown, expired or revoked credential."""


class AuthorizationError(BlockIoTError):
    """Authenticated, but not allowed to act on the target patient."""


class RequestError(BlockIoTError):
    """Malformed request at the transport boundary."""


class BatchTooLargeError(RequestError):
    pass


class BackpressureError(BlockIoTError):
    """Intake queue full; the sender should retry later."""

    retryable = True


class NotFoundError(BlockIoTError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else "not found"


class IntegrityError(BlockIoTError):
    pass


class ConflictError(BlockIoTError):
    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class LinkageError(BlockIoTError):
    pass


class ConfigError(BlockIoTError):
    pass


class StartupError(BlockIoTError):
    def __init__(self, component: str, message: str, exit_code: int = 1):
        super().__init__(f"{component}: {message}")
        self.component = component
        self.exit_code = exit_code

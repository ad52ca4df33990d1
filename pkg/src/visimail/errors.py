"""Exception hierarchy shared by every pipeline stage."""
from __future__ import annotations


class VisimailError(Exception):
    """Base class for all package errors."""


class MalformedMessage(VisimailError):
    pass


class NoRenderablePart(VisimailError):
    pass


class RendererTimeout(VisimailError):
    pass


class RendererFailed(VisimailError):
    def __init__(self, message: str, returncode: int | None = None, stderr: str = ""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr


class BadImage(VisimailError):
    pass


class FixtureMissing(VisimailError):
    pass


class CropTooLarge(VisimailError):
    pass


class BackendTimeout(VisimailError):
    pass


class BackendFailed(VisimailError):
    def __init__(self, message: str, returncode: int | None = None, stderr: str = ""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr


class DimMismatch(VisimailError):
    pass


class BackendMismatch(VisimailError):
    pass


class DuplicateId(VisimailError):
    pass


class CorruptFile(VisimailError):
    pass


class IoFailure(VisimailError):
    pass


class UnknownCluster(VisimailError):
    pass


class IdMismatch(VisimailError):
    pass


class ConfigError(VisimailError):
    pass


class StageError(VisimailError):
    """A failure inside one pipeline stage; ``tag`` reads ``"<stage>/<ErrorName>"``."""

    def __init__(self, stage: str, cause: BaseException, email_id: str | None = None):
        self.stage = stage
        self.cause = cause
        self.email_id = email_id
        self.tag = f"{stage}/{type(cause).__name__}"
        super().__init__(f"{self.tag}: {cause}")

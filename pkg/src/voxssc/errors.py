"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage problems exit 1, bad data or
file formats exit 2, numeric failures exit 3.
"""


class SSCError(Exception):
    """Base class for all package errors."""

    exit_code = 2

    def __init__(self, message: str = "", *, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class InvalidArgumentError(SSCError, ValueError):
    pass


class ConfigError(InvalidArgumentError):
    exit_code = 1


class FormatError(SSCError):
    """Malformed grid or camera file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None, *, stage: str | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message, stage=stage)
        self.offset = offset


class SingularTransformError(SSCError, ArithmeticError):
    exit_code = 3


class BehindCameraError(SSCError, ValueError):
    pass


class InvariantError(SSCError, RuntimeError):
    exit_code = 3


class OptimizationError(SSCError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, step: int | None = None, *, stage: str | None = None):
        super().__init__(message, stage=stage)
        self.step = step


class stage:
    """Context manager tagging any package error raised inside with a stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, SSCError) and exc.stage is None:
            exc.stage = self.name
        return False

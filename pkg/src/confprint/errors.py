"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array argument has the wrong shape or length."""


class FormatError(ValueError):
    """A file does not conform to its declared on-disk format."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class OptimizationError(RuntimeError):
    """Input optimization produced a non-finite loss."""


class StageError(RuntimeError):
    """A pipeline stage failed; earlier stages remain persisted."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

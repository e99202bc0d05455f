"""
Exception hierarchy for the RIS spoofing simulator.

The CLI maps ConfigError to exit code 2 and NumericalFailure to exit code 3.
"""


class SpoofSimError(Exception):
    """Base class for every error raised by the simulator."""
    pass


class ConfigError(SpoofSimError):
    """Configuration file could not be parsed or failed validation."""

    def __init__(self, message: str, field: str = "", line: int = None):
        self.field = field
        self.line = line
        location = ""
        if field:
            location += f" [{field}]"
        if line is not None:
            location += f" (line {line})"
        super().__init__(f"{message}{location}")


class InvalidInputError(SpoofSimError, ValueError):
    """An operation received an input outside its precondition."""
    pass


class NumericalFailure(SpoofSimError):
    """Training or evaluation produced non-finite values that retries could not fix."""
    pass


class StlWindowError(InvalidInputError):
    """A temporal window does not fit inside the trajectory."""

    def __init__(self, message: str, path: str):
        self.path = path
        super().__init__(f"{message} at {path}")


class StlSyntaxError(InvalidInputError):
    """Formula text does not conform to the grammar."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


class ArtifactLoaderError(SpoofSimError):
    """Dataset, manifest, policy or bundle file could not be loaded."""
    pass


class PipelineStageError(SpoofSimError):
    """Failure inside a pipeline stage, labelled with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"Stage '{stage}' failed: {cause}")

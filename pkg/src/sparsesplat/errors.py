"""Exception types shared across the reconstruction pipeline."""


class SparseSplatError(Exception):
    """Base class for all pipeline errors."""


class InvalidInputError(SparseSplatError):
    """Caller-supplied value violates an operation precondition."""


class BehindCameraError(SparseSplatError):
    """Point lies at or behind the near plane of the camera."""


class DegeneratePairError(SparseSplatError):
    """View pair shares no covisible surface."""


class InsufficientViewsError(SparseSplatError):
    """Fewer views than the operation requires."""


class InvalidFocalError(SparseSplatError):
    """Focal estimate is non-positive or non-finite."""


class EmptySceneError(SparseSplatError):
    """Operation requires at least one Gaussian or surviving point."""


class RenderError(SparseSplatError):
    """Non-finite Gaussian parameter encountered while rendering.

    Attributes:
        gaussian_index: index of the first offending Gaussian.
    """

    def __init__(self, message: str, gaussian_index: int = -1):
        super().__init__(message)
        self.gaussian_index = gaussian_index


class ContractViolationError(SparseSplatError):
    """Backward pass invoked with inputs that do not match the forward pass."""


class OptimizationDivergedError(SparseSplatError):
    """Objective became non-finite during optimization.

    Attributes:
        iteration: iteration index at which the divergence was detected.
    """

    def __init__(self, message: str, iteration: int = -1):
        super().__init__(message)
        self.iteration = iteration


class DegenerateAlignmentError(SparseSplatError):
    """Trajectory alignment is underdetermined (e.g. coincident translations)."""


class FileFormatError(SparseSplatError):
    """Base class for structured-file parsing failures."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(FileFormatError):
    """File ends before the payload promised by its header."""


class DimensionMismatchError(FileFormatError):
    """Header dimensions disagree with the expected dataset resolution."""


class NonFinitePayloadError(FileFormatError):
    """Payload contains NaN or infinite values."""


class ParseError(FileFormatError):
    """Text file line failed to parse.

    Attributes:
        line_number: 1-based line number of the offending line.
    """

    def __init__(self, message: str, line_number: int = -1):
        super().__init__(message)
        self.line_number = line_number


class PipelineStageError(SparseSplatError):
    """Wraps a module error with the pipeline stage that raised it.

    Attributes:
        stage: pipeline stage label.
    """

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

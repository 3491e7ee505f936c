"""Exception types shared across the package."""


class SurfelSimError(Exception):
    """Base class for all package-specific errors."""


class SceneValidationError(SurfelSimError):
    """Raised when a scene fails validation before simulation."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "\n".join(str(d) for d in self.diagnostics)
        super().__init__(f"scene validation failed:\n{lines}")


class SceneFormatError(SurfelSimError):
    """Raised when a scene or action file violates the documented schema."""


class NonWatertightError(SurfelSimError):
    """Surface enclosed no interior voxels, so it cannot be volume-filled."""


class DegenerateGeometryError(SurfelSimError):
    """Geometry too degenerate for the requested operation (e.g. collinear rigid body)."""


class InvertedElementError(SurfelSimError):
    """A deformation gradient lost positive determinant."""


class OutOfDomainError(SurfelSimError):
    """A particle left the solver grid domain."""


class TopologyMismatchError(SurfelSimError):
    """Two scenes expected to share surfel topology do not."""


class StageError(SurfelSimError):
    """Wraps a failure with the pipeline stage it occurred in."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")

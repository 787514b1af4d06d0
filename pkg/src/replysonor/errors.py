"""Exception hierarchy for ReplySonor."""


class ReplySonorError(Exception):
    """Base class for every error raised by ReplySonor."""

    kind = "error"


class InvariantViolation(ReplySonorError, ValueError):
    """Raised when an input breaks a structural invariant (ids, shapes, codes)."""

    kind = "invariant_violation"


class EmptyInputError(ReplySonorError, ValueError):
    """Raised when an operation that needs data receives none."""

    kind = "empty_input"


class ArtifactFormatError(ReplySonorError, ValueError):
    """Raised when an artifact file has a bad magic, version or header."""

    kind = "artifact_format"


class StaleArtifactError(ReplySonorError, RuntimeError):
    """Raised when an upstream artifact hash does not match what was recorded."""

    kind = "stale_artifact"

    def __init__(self, path, expected: str, actual: str):
        self.path = str(path)
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"stale artifact {self.path}: expected sha256 {expected[:12]}, found {actual[:12]}"
        )


class TrainingDivergedError(ReplySonorError, RuntimeError):
    """Raised when the loss or a gradient becomes non-finite."""

    kind = "training_diverged"

    def __init__(self, message: str, step: int = -1, diagnostics: dict = None):
        self.step = step
        self.diagnostics = diagnostics or {}
        detail = ", ".join(f"{k}={v}" for k, v in sorted(self.diagnostics.items()))
        super().__init__(f"{message} at step {step}" + (f" ({detail})" if detail else ""))

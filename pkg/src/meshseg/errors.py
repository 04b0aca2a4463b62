"""Exception types shared across the toolkit."""


class ContractViolation(ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf appeared at an operation boundary."""


class TapeConsumedError(RuntimeError):
    """backward() was called twice on the same tape."""


class DegenerateBatchError(ContractViolation):
    """Batch normalization in train mode needs at least 2 rows."""


class MeshFormatError(ValueError):
    """A mesh or label file failed to parse.

    Carries the 1-based line number when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateGeometryError(ValueError):
    """Zero-area face or other unusable geometry."""


class PartialDecimationError(RuntimeError):
    """Decimation stopped early; `achieved` is the face count reached."""

    def __init__(self, achieved, target):
        super().__init__(
            f"could not decimate below {achieved} faces "
            f"(target {target}) without violating the topology guard"
        )
        self.achieved = achieved
        self.target = target


class GenerationError(ValueError):
    """Synthetic-arch spec is infeasible (e.g. overlapping bumps)."""

"""Exception types shared across the package."""


class GanMergeError(Exception):
    """Base class for all package errors."""


class DescriptorError(GanMergeError):
    """Invalid architecture descriptor."""


class SignatureMismatchError(GanMergeError):
    """Two parameter sets do not share the same name/shape signature."""


class ShapeError(GanMergeError):
    """An input tensor does not match the shape a model expects."""


class TrainingDivergedError(GanMergeError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, step: int, term: str):
        self.step = step
        self.term = term
        super().__init__(f"non-finite value in '{term}' at step {step}")


class CheckpointError(GanMergeError):
    """Checkpoint file is malformed, truncated, or fails hash verification."""


class ConfigError(GanMergeError):
    """Experiment configuration failed validation.

    `field` carries the dotted path of the offending entry.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")

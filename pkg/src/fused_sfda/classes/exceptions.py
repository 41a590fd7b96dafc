"""
Errors raised across the toolkit. Each one keeps the offending values on the
instance so callers (and the CLI) can report them without parsing messages.
"""

from typing import Optional, Sequence


class ShapeMismatchError(ValueError):
    """Raised when an array does not have the dimensions a branch or bank expects."""

    def __init__(self, what: str, expected: Sequence[int], actual: Sequence[int]):
        self.what = what
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(
            f"{what}: expected dims {self.expected}, got {self.actual}"
        )


class NonFiniteError(ValueError):
    """Raised when a feature or probability row contains NaN or inf."""

    def __init__(self, what: str, row: int):
        self.what = what
        self.row = row
        super().__init__(f"{what}: non-finite or invalid values in row {row}")


class ZeroNormError(ValueError):
    """Raised when a row that must be normalised has zero L2 norm."""

    def __init__(self, what: str, row: int):
        self.what = what
        self.row = row
        super().__init__(f"{what}: row {row} has zero norm")


class DegenerateClassifierError(ZeroNormError):
    """A classifier weight row is all zeros, so no prototype can be derived."""

    def __init__(self, class_index: int):
        super().__init__("classifier weight", class_index)


class LabelRangeError(ValueError):
    def __init__(self, label: int, num_classes: int):
        self.label = label
        self.num_classes = num_classes
        super().__init__(f"Label {label} outside [0, {num_classes})")


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be decoded. Names the failing section."""

    def __init__(self, section: str, detail: str):
        self.section = section
        self.detail = detail
        super().__init__(f"Dataset file invalid in section '{section}': {detail}")


class PreprocessError(ValueError):
    def __init__(self, stage: str, detail: str):
        self.stage = stage
        super().__init__(f"Preprocessing stage '{stage}' failed: {detail}")


class SplitError(ValueError):
    pass


class ConfigError(KeyError):
    """
    An error raised for unknown keys, bad types or out-of-range values in an
    experiment config. Carries the dotted key path and, for unknown keys, the
    closest known key.
    """

    def __init__(self, key_path: str, detail: str, suggestion: Optional[str] = None):
        self.key_path = key_path
        self.detail = detail
        self.suggestion = suggestion
        message = f"Config key '{key_path}': {detail}"
        if suggestion:
            message += f" (did you mean '{suggestion}'?)"
        super().__init__(message)

    def __str__(self) -> str:
        return str(self.args[0])


class NonFiniteLossError(RuntimeError):
    def __init__(self, loss_name: str, epoch: int, batch: int):
        self.loss_name = loss_name
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            f"Non-finite {loss_name} at epoch {epoch}, batch {batch}; run aborted"
        )


class FreezeViolationError(RuntimeError):
    def __init__(self, group: str):
        self.group = group
        super().__init__(f"Frozen parameter group '{group}' changed during training")


class CheckpointError(ValueError):
    def __init__(self, path: str, detail: str):
        self.path = path
        super().__init__(f"Checkpoint {path}: {detail}")


class GradientCheckError(RuntimeError):
    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"Non-finite gradient for parameter '{parameter}'")


class CrossCheckError(RuntimeError):
    """A result row disagrees with the run report it was derived from."""

    def __init__(self, key: tuple[int, int, str], column: str, row_value, stored_value):
        self.key = key
        self.column = column
        super().__init__(
            f"Result {key} column '{column}': table has {row_value}, "
            f"stored report gives {stored_value}"
        )

from typing import Any, Optional


class DtnLabError(Exception):
    """Base class for every error raised by dtnlab."""


class SchemaError(DtnLabError):
    pass


class DataFormatError(DtnLabError):
    """A source file could not be parsed. `row` is 1-based when known."""

    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class BuildError(DtnLabError):
    pass


class ShapeError(DtnLabError):
    pass


class NumericalError(DtnLabError):
    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(message if layer is None else f"{layer}: {message}")
        self.layer = layer


class TrainingDiverged(NumericalError):
    """Raised when the loss stops being finite. The model is restored to its last good state."""

    def __init__(self, message: str, model: Any, history: list):
        super().__init__(message, layer="loss")
        self.model = model
        self.history = history


class ConfigError(DtnLabError):
    def __init__(
        self, message: str, key_path: Optional[str] = None, line: Optional[int] = None
    ):
        prefix = ""
        if key_path:
            prefix = f"{key_path}: "
        elif line is not None:
            prefix = f"line {line}: "
        super().__init__(prefix + message)
        self.key_path = key_path
        self.line = line


class CheckpointError(DtnLabError):
    pass


class ReportError(DtnLabError):
    pass


class MetricError(DtnLabError):
    pass


class InspectionError(DtnLabError):
    """Gate-weight extraction, trimming or export asked for something the model lacks."""

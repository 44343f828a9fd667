"""
Structured errors
=================

Every failure the library raises on purpose is a ``RegTextError``. Each
subclass keeps the values that caused it as attributes so callers (and the
CLI) can report them without parsing messages.
"""

from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple


class RegTextError(ValueError):
    """Base class for all regtext errors."""


class ShapeError(RegTextError):
    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        shown = " vs ".join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {shown}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class AxisError(RegTextError):
    def __init__(self, op: str, axis: int, shape: Tuple[int, ...], detail: str = ""):
        self.op = op
        self.axis = axis
        self.shape = tuple(shape)
        super().__init__(f"{op}: invalid axis {axis} for shape {self.shape}" + (f" ({detail})" if detail else ""))


class LabelRangeError(RegTextError):
    def __init__(self, label: int, num_classes: int):
        self.label = label
        self.num_classes = num_classes
        super().__init__(f"label {label} outside [0, {num_classes})")


class DistributionError(RegTextError):
    def __init__(self, op: str, max_deviation: float):
        self.op = op
        self.max_deviation = max_deviation
        super().__init__(f"{op}: rows are not probability vectors (max |sum-1| = {max_deviation:.3g})")


class GraphError(RegTextError):
    pass


class MissingGradientError(RegTextError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"trainable tensor '{name}' has no gradient; was it part of the loss?")


class ProbabilityError(RegTextError):
    def __init__(self, name: str, value: float):
        self.name = name
        self.value = value
        super().__init__(f"{name}={value} must lie in [0, 1)")


class EmbeddingFileError(RegTextError):
    def __init__(self, path: Path, reason: str):
        self.path = Path(path)
        self.reason = reason
        super().__init__(f"cannot read embeddings from {self.path}: {reason}")


class EmbeddingDimensionError(RegTextError):
    def __init__(self, path: Path, expected: int, found: int):
        self.path = Path(path)
        self.expected = expected
        self.found = found
        super().__init__(f"{self.path}: vectors have dimension {found}, expected {expected}")


class DatasetFormatError(RegTextError):
    def __init__(self, path: Path, row: Optional[int], reason: str):
        self.path = Path(path)
        self.row = row
        self.reason = reason
        where = f" row {row}" if row is not None else ""
        super().__init__(f"{self.path}{where}: {reason}")


class ClassCountError(RegTextError):
    def __init__(self, path: Path, expected: int, found: int):
        self.path = Path(path)
        self.expected = expected
        self.found = found
        super().__init__(f"{self.path}: found {found} classes, expected {expected}")


class InsufficientDataError(RegTextError):
    def __init__(self, split: str, class_index: Optional[int], needed: int, available: int):
        self.split = split
        self.class_index = class_index
        self.needed = needed
        self.available = available
        who = f"class {class_index}" if class_index is not None else "pool"
        super().__init__(f"{split} split needs {needed} documents from {who}, only {available} available")


class EncoderKindError(RegTextError):
    def __init__(self, operation: str, expected: str, found: str):
        self.operation = operation
        self.expected = expected
        self.found = found
        super().__init__(f"{operation} requires encoder {expected}, model uses {found}")


class RegimeError(RegTextError):
    def __init__(self, operation: str, regime: str, allowed: Iterable[str]):
        self.operation = operation
        self.regime = regime
        self.allowed = list(allowed)
        super().__init__(f"{operation} is not defined for regime {regime} (allowed: {', '.join(self.allowed)})")


class ConfigError(RegTextError):
    def __init__(self, path: Optional[Path], problems: List[Tuple[str, str]]):
        self.path = Path(path) if path is not None else None
        self.problems = problems
        lines = [f"  {loc}: {msg}" for loc, msg in problems]
        source = str(self.path) if self.path else "config"
        super().__init__(f"invalid {source}:\n" + "\n".join(lines))


class DivergenceError(RegTextError):
    """Training produced a non-finite loss."""

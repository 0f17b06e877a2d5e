"""
MorphXAI exception hierarchy.
User-facing errors map to CLI exit code 1, everything else to 2.
"""

from pathlib import Path
from typing import Optional


class MorphXAIError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MorphXAIError, ValueError):
    """Invalid run/scene/model configuration."""


class SchemaError(MorphXAIError, KeyError):
    """Unknown attribute name."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class ValidationError(MorphXAIError, ValueError):
    """Illegal or missing attribute value in an annotation record."""

    def __init__(
        self,
        message: str,
        attribute: Optional[str] = None,
        value: object = None,
        image_index: Optional[int] = None,
        instance_index: Optional[int] = None,
    ):
        super().__init__(message)
        self.attribute = attribute
        self.value = value
        self.image_index = image_index
        self.instance_index = instance_index


class ContractError(MorphXAIError, ValueError):
    """Shape, range or cardinality contract violated by a caller."""


class CheckpointError(MorphXAIError):
    """Checkpoint cannot be loaded (format version or vocabulary mismatch)."""


class DatasetIOError(MorphXAIError, OSError):
    """Reading or writing dataset files failed."""


class ReportIOError(MorphXAIError, OSError):
    """Writing report files failed."""


class TrainingAborted(MorphXAIError):
    """Training stopped on a non-finite loss."""

    def __init__(self, message: str, dump_path: Optional[Path] = None):
        super().__init__(message)
        self.dump_path = dump_path

"""Exception hierarchy shared across the package.

Every validation failure raises an ``AvparseError`` subclass so the CLI can
map expected failures to exit code 1 and genuine bugs to exit code 2.
"""


class AvparseError(Exception):
    """Base class for all expected, user-facing errors."""


class ShapeError(AvparseError):
    """Invalid or incompatible tensor shapes."""


class ContractError(AvparseError):
    """A documented precondition was violated by the caller."""


class ConfigError(AvparseError):
    """Invalid configuration value."""


class FormatError(AvparseError):
    """Malformed binary file (feature files, checkpoints)."""


class ParseError(AvparseError):
    """Malformed text input (CSV, manifest, config)."""


class VocabularyError(AvparseError):
    """Category name outside the class vocabulary."""


class PatchError(AvparseError):
    """Annotation patch targets a row it is not allowed to change."""


class CombineError(AvparseError):
    """Donor video not eligible for cross-modal combination."""


class CapacityError(AvparseError):
    """Requested batch exceeds the number of distinct donor pairs."""


class EvaluationError(AvparseError):
    """Evaluation requested without the required ground truth."""


class CheckpointError(AvparseError):
    """Checkpoint missing, malformed, or incompatible with the model."""


class TrainingError(AvparseError):
    """Training aborted (non-finite loss or similar)."""

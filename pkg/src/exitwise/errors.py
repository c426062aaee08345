"""Exception types shared across the engine."""


class ExitwiseError(Exception):
    """Base class for all engine errors."""


class ShapeError(ExitwiseError):
    """Tensor dimensions disagree with an operation's contract."""


class ContractError(ExitwiseError):
    """An API precondition was violated (bad index, non-scalar loss, ...)."""


class ConfigError(ExitwiseError):
    """Invalid configuration: unknown key, bad value, inconsistent fields."""


class DataError(ExitwiseError):
    """Dataset-level problem (empty set, bad label, too few speakers)."""


class EmptySequenceError(DataError):
    """An operation that needs at least one time step got none."""


class LabelError(DataError):
    """A class label is outside the valid range."""


class WavFormatError(DataError):
    """The file is not a well-formed RIFF/WAVE container."""


class WavEncodingError(DataError):
    """The WAVE encoding is valid but unsupported (stereo, 24-bit, ...)."""


class ManifestError(DataError):
    """A manifest row is missing or malformed."""


class NumericError(ExitwiseError):
    """A non-finite value surfaced where the math guarantees finiteness."""


class CheckpointError(ExitwiseError):
    """Base class for checkpoint container problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends in the middle of a record."""


class CheckpointMismatchError(CheckpointError):
    """Architecture hash or tensor table does not match the target model."""


class BudgetInfeasibleError(ExitwiseError):
    """No exit fits under the requested resource budget."""

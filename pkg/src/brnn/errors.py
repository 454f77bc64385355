"""Exception hierarchy shared by every brnn module."""


class BrnnError(Exception):
    """Base class for all library errors."""


class DimensionError(BrnnError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(BrnnError, ArithmeticError):
    """A computation produced NaN or infinity, or left its domain."""


class ContractError(BrnnError, ValueError):
    """A precondition of an operation was violated."""


class TargetIndexError(BrnnError, IndexError):
    """A class index lies outside the vocabulary."""


class DataError(BrnnError, ValueError):
    """Corpus or batching problem."""


class VocabError(DataError):
    """A token is unknown and the vocabulary has no UNK symbol."""


class ConfigError(BrnnError, ValueError):
    """Malformed or unknown configuration entry."""


class StorageError(BrnnError, OSError):
    """Checkpoint could not be written."""


class FormatError(BrnnError, ValueError):
    """Checkpoint file is malformed."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ShapeMismatchError(FormatError, DimensionError):
    """Stored tensors do not match the architecture they are loaded into."""

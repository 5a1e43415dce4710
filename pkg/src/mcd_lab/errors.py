"""Exception hierarchy for the whole package.

Every kind of contract violation gets its own class so callers (and tests)
can catch precisely.  All inherit from ``McdLabError``.
"""


class McdLabError(Exception):
    """Base class for all errors raised by this package."""


class ZeroVectorError(McdLabError):
    """A row with (near-)zero norm cannot be normalized."""


class DimMismatchError(McdLabError):
    """Embedding dimensions of two batches disagree."""


class NotSquareError(McdLabError):
    """A similarity matrix that must be square is not."""


class ShapeMismatchError(McdLabError):
    """Arrays that must share a shape do not."""


class EmptyPositivesError(McdLabError):
    """A row has no positive partners besides itself."""


class EmptyNegativesError(McdLabError):
    """A row has no negatives at all."""


class IndexOutOfRangeError(McdLabError):
    """A pair index points outside its matrix."""


class BatchTooSmallError(McdLabError):
    """Pairwise losses need at least two groups in the batch."""


class TargetOutOfRangeError(McdLabError):
    """A classification target exceeds the vocabulary."""


class TokenOutOfRangeError(McdLabError):
    """A token id exceeds the vocabulary."""


class PositionOutOfRangeError(McdLabError):
    """A mask position points outside the sequence."""


class StepOutOfRangeError(McdLabError):
    """A schedule was queried outside [0, total_steps]."""


class NonFiniteLossError(McdLabError):
    """A loss or gradient became NaN/Inf; the run must abort."""


class CorruptCheckpointError(McdLabError):
    """Checkpoint file failed magic, manifest or size validation."""


class TooFewPairsError(McdLabError):
    """Retrieval evaluation needs a minimum number of pairs."""


class DegenerateOracleError(McdLabError):
    """All oracle scores identical; rank correlation undefined."""


class BadHeaderError(McdLabError):
    """A CSV header does not match any known layout."""


class ConfigError(McdLabError):
    """Unknown or invalid key in a configuration file."""


class UsageError(McdLabError):
    """Command line was malformed."""

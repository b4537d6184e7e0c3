"""Exception types shared across the toolkit.

Every error carries a stable ``code`` string (what went wrong) and an
``exit_code`` used by the CLI: 2 for configuration problems, 3 for bad or
missing data, 4 for failures inside a pipeline stage.
"""


class MillisegError(Exception):
    code = "ERROR"
    exit_code = 4


class ConfigError(MillisegError):
    exit_code = 2


class DataError(MillisegError):
    exit_code = 3


# -- file IO and domain invariants ---------------------------------------

class MalformedFileError(DataError):
    code = "MALFORMED_FILE"


class DimMismatchError(DataError):
    code = "DIM_MISMATCH"


class IOFailureError(DataError):
    code = "IO_FAILURE"


class LengthMismatchError(DataError):
    code = "LENGTH_MISMATCH"


# -- pruning / selection ---------------------------------------------------

class ZeroVectorError(DataError):
    code = "ZERO_VECTOR"


class EmptySequenceError(DataError):
    code = "EMPTY_SEQUENCE"


class TooFewPointsError(DataError):
    code = "TOO_FEW_POINTS"


class DegenerateError(DataError):
    code = "DEGENERATE"


class TooFewFramesError(DataError):
    code = "TOO_FEW_FRAMES"


class BudgetExceedsPoolError(ConfigError):
    code = "BUDGET_EXCEEDS_POOL"


# -- clustering ------------------------------------------------------------

class BadKError(ConfigError):
    code = "BAD_K"


class EmptyClusterError(DataError):
    code = "EMPTY_CLUSTER"


# -- annotation ------------------------------------------------------------

class NoGroundTruthError(DataError):
    code = "NO_GROUND_TRUTH"


class SessionIncompleteError(MillisegError):
    code = "SESSION_INCOMPLETE"


# -- training --------------------------------------------------------------

class AllUnlabeledError(DataError):
    code = "ALL_UNLABELED"


class NoLabeledDataError(DataError):
    code = "NO_LABELED_DATA"


class NonFiniteLossError(MillisegError):
    code = "NON_FINITE_LOSS"


# -- annotation service ------------------------------------------------------

class UnknownFrameError(DataError):
    code = "UNKNOWN_FRAME"


class MissingClusteringError(DataError):
    code = "MISSING_CLUSTERING"


class UnknownSessionError(DataError):
    code = "UNKNOWN_SESSION"


class OutOfOrderError(MillisegError):
    code = "OUT_OF_ORDER"


class InvalidClassError(MillisegError):
    code = "INVALID_CLASS"


class NothingToUndoError(MillisegError):
    code = "NOTHING_TO_UNDO"

"""Exception types shared by every module.

Each exception carries a short machine-readable ``code`` and the process exit
status the CLI uses when it escapes a subcommand.
"""


class PredNetMusicError(Exception):
    code = "error"
    exit_status = 3


class UsageError(PredNetMusicError):
    code = "usage"
    exit_status = 2


class DataError(PredNetMusicError):
    code = "data"
    exit_status = 3


class AudioFormatError(DataError):
    code = "audio_format"


class ShapeMismatchError(DataError):
    code = "shape_mismatch"


class CheckpointError(DataError):
    code = "checkpoint"


class DegenerateRegressionError(DataError):
    code = "degenerate_regression"


class DivergenceError(PredNetMusicError):
    code = "divergence"
    exit_status = 4

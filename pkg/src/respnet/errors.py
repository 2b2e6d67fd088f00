"""Exception hierarchy shared by every module.

Each exception carries a short machine-readable ``code`` that the CLI prints
alongside the human message.
"""


class RespNetError(Exception):
    code = "ERROR"


class ShapeMismatch(RespNetError, ValueError):
    code = "SHAPE_MISMATCH"


class EmptyOutput(RespNetError, ValueError):
    code = "EMPTY_OUTPUT"


class DegenerateBatch(RespNetError, ValueError):
    code = "DEGENERATE_BATCH"


class NoTape(RespNetError, RuntimeError):
    code = "NO_TAPE"


class MissingGrad(RespNetError, RuntimeError):
    code = "MISSING_GRAD"


class InvalidConfig(RespNetError, ValueError):
    code = "INVALID_CONFIG"


class FormatError(RespNetError, ValueError):
    code = "FORMAT_ERROR"


class ConfigMismatch(RespNetError, ValueError):
    code = "CONFIG_MISMATCH"


class IoError(RespNetError, OSError):
    code = "IO_ERROR"


class NonMonotonicTime(RespNetError, ValueError):
    code = "NON_MONOTONIC_TIME"


class EmptyInput(RespNetError, ValueError):
    code = "EMPTY_INPUT"


class RecordTooShort(RespNetError, ValueError):
    code = "RECORD_TOO_SHORT"


class TooFewWindows(RespNetError, ValueError):
    code = "TOO_FEW_WINDOWS"


class NoBeats(RespNetError, ValueError):
    code = "NO_BEATS"


class TooFewBeats(RespNetError, ValueError):
    code = "TOO_FEW_BEATS"


class TooFewPoints(RespNetError, ValueError):
    code = "TOO_FEW_POINTS"


class LengthMismatch(RespNetError, ValueError):
    code = "LENGTH_MISMATCH"


class DegenerateSignal(RespNetError, ValueError):
    code = "DEGENERATE_SIGNAL"


class EmptyEvaluation(RespNetError, ValueError):
    code = "EMPTY_EVALUATION"


class EmptyTrainSet(RespNetError, ValueError):
    code = "EMPTY_TRAIN_SET"


class DivergedLoss(RespNetError, FloatingPointError):
    code = "DIVERGED_LOSS"

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class WindowOutOfRange(RespNetError, IndexError):
    code = "WINDOW_OUT_OF_RANGE"

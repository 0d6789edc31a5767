"""Exception hierarchy shared by all sleepstage modules.

Every error raised on a contract violation derives from ``SleepStageError``
so callers (and the CLI) can report a stable error kind: the class name.
"""


class SleepStageError(Exception):
    """Base class for all errors raised by this package."""

    @property
    def kind(self) -> str:
        return type(self).__name__


# --- EDF / hypnogram I/O ---------------------------------------------------

class MalformedHeader(SleepStageError):
    pass


class TruncatedData(SleepStageError):
    pass


class RangeOverflow(SleepStageError):
    pass


class InvalidSpec(SleepStageError):
    pass


class UnknownLabel(SleepStageError):
    def __init__(self, label: str, line: int):
        super().__init__(f"unknown stage label {label!r} on line {line}")
        self.label = label
        self.line = line


# --- DSP --------------------------------------------------------------------

class EmptyInput(SleepStageError):
    pass


class FrequencyOutOfRange(SleepStageError):
    pass


class SampleRateMismatch(SleepStageError):
    pass


class TooShort(SleepStageError):
    pass


class MissingLabels(SleepStageError):
    pass


class EmptyClass(SleepStageError):
    pass


# --- HHT / autoencoder -------------------------------------------------------

class NonFinite(SleepStageError):
    pass


class InvalidLatentDim(SleepStageError):
    pass


class DimensionMismatch(SleepStageError):
    pass


# --- Network / optimizer ------------------------------------------------------

class ShapeMismatch(SleepStageError):
    pass


class NonFiniteGradient(SleepStageError):
    pass


class NoForwardCache(SleepStageError):
    pass


class IndexOutOfRange(SleepStageError, IndexError):
    pass


# --- Pipeline -----------------------------------------------------------------

class TooFewItems(SleepStageError):
    pass


class EmptyDataset(SleepStageError):
    pass


# --- Model store ----------------------------------------------------------------

class BadMagic(SleepStageError):
    pass


class ChecksumMismatch(SleepStageError):
    pass


class VersionUnsupported(SleepStageError):
    pass


# --- CLI -------------------------------------------------------------------------

class InvalidConfig(SleepStageError):
    pass


class IoError(SleepStageError):
    pass

"""Exception hierarchy shared by all kwglow modules.

Every error carries the CLI exit code of its class: usage errors exit 1,
data errors (bad files, bad corpora, bad shapes) exit 2, runtime failures
(numerics, I/O, sockets) exit 3.
"""


class KwglowError(Exception):
    exit_code = 3


class UsageError(KwglowError):
    exit_code = 1


class DataError(KwglowError):
    exit_code = 2


class RuntimeFailure(KwglowError):
    exit_code = 3


# --- dsp ---

class NotWav(DataError):
    """File is not a RIFF/WAVE container."""


class UnsupportedFormat(DataError):
    """WAV exists but is not 16-bit PCM mono."""


class EmptyAudio(DataError):
    """Zero-sample audio where samples are required."""


class ConfigInvalid(DataError):
    """A configuration violates its invariants."""


class IoFailure(RuntimeFailure):
    """Filesystem write/read failed."""


# --- numerics ---

class ShapeMismatch(DataError):
    """Tensor arguments do not have compatible shapes."""


# --- flow ---

class NotDivisible(DataError):
    """Sample count not divisible by the group size."""


class MelTooShort(DataError):
    """Conditioning mel does not cover the requested audio span."""


class SingularW(DataError):
    """Channel-mixing matrix is singular (|det| below 1e-12)."""


class NonFiniteScale(RuntimeFailure):
    """Coupling scale output contains NaN or infinity."""


# --- training ---

class NonFiniteLoss(RuntimeFailure):
    """Loss became NaN/inf; the offending step was not applied."""


class CorruptFile(DataError):
    """Checkpoint or feature file failed its header or length checks."""


class VersionMismatch(DataError):
    """Checkpoint format/config does not match what the loader expects."""


class CorpusEmpty(DataError):
    """Training requested on a manifest with no usable records."""


# --- corpus ---

class ParseError(DataError):
    """Malformed manifest or ratings file; message carries the line number."""


class DuplicateId(DataError):
    """Two manifest records share an id."""


class SplitLeak(DataError):
    """A test sentence duplicates a training sentence."""


class UnknownNormalizer(DataError):
    """Requested text normalizer is not registered."""


# --- evaluation ---

class EmptyScores(DataError):
    """MOS requested over an empty score list."""


class ScoreOutOfRange(DataError):
    """A rating score is outside 1..5."""


class DuplicateRating(DataError):
    """A (rater, sample, model) triple was rated twice."""

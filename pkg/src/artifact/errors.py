"""Exception hierarchy shared by every stage of the toolkit.

The CLI maps :class:`ConfigError` and :class:`ToolNotFoundError` to exit
code 2; everything else surfaces as a regular failure.
"""


class ArtifactError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ArtifactError, ValueError):
    pass


class FormatError(ArtifactError, ValueError):
    """Malformed container or file header."""


class UnsupportedCodecError(ArtifactError, ValueError):
    pass


class EmptyInputError(ArtifactError, ValueError):
    pass


class TooShortError(ArtifactError, ValueError):
    """Input shorter than an operation needs; ``duration`` is in seconds or frames."""

    def __init__(self, message, duration=None):
        super().__init__(message)
        self.duration = duration


class ShapeError(ArtifactError, ValueError):
    pass


class WeightError(ArtifactError, ValueError):
    """Weights do not fit the model they were loaded into."""


class CorruptionError(FormatError):
    """Weight file payload disagrees with its own header."""


class DivergenceError(ArtifactError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FrozenViolationError(ArtifactError, RuntimeError):
    pass


class IncompleteBankError(ArtifactError, KeyError):
    def __init__(self, track_id, codec):
        super().__init__(f"codec bank has no {codec!r} variant for track {track_id!r}")
        self.track_id = track_id
        self.codec = codec

    def __str__(self):
        return self.args[0]


class EncoderError(ArtifactError, RuntimeError):
    def __init__(self, message, returncode=None, stderr=""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr


class ToolNotFoundError(ArtifactError, RuntimeError):
    """An external encoder/decoder is missing from the execution path."""


class AlignmentError(ArtifactError, ValueError):
    pass


class UndefinedBandwidthError(ArtifactError, ValueError):
    pass


class NoSegmentsError(ArtifactError, ValueError):
    pass


class UndefinedAUCError(ArtifactError, ValueError):
    pass

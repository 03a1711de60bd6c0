"""Exception types raised across the engine.

Every error that callers are expected to catch has a named class here so
that CLI commands can map failures onto stable exit codes.
"""


class WeaveTtsError(Exception):
    """Base class for all engine errors."""


class TextOverrun(WeaveTtsError):
    """Mel frames ran out while text tokens still had to be placed."""


class InvalidReduction(WeaveTtsError):
    """Frames-per-step does not divide the mel group size."""


class UnknownToken(WeaveTtsError):
    """Token id outside the embedding table."""


class ShapeError(WeaveTtsError):
    """Vector or frame with the wrong dimensions."""


class MaxLengthExceeded(WeaveTtsError):
    """Decoder position would exceed the configured maximum."""


class InvalidSampleCount(WeaveTtsError):
    """Latent sample count must be at least 1."""


class EmptyMask(WeaveTtsError):
    """A masked loss was asked to average over zero elements."""


class NonFiniteLoss(WeaveTtsError):
    """Loss evaluated to NaN or infinity."""


class AlreadyPrimed(WeaveTtsError):
    """A stream may only be primed once, before any step."""


class StreamClosed(WeaveTtsError):
    """step() called on a stream that already stopped."""


class TraceIncomplete(WeaveTtsError):
    """Event trace is missing its end-of-text marker."""


class NoOutput(WeaveTtsError):
    """A synthesis run or score was given zero frames."""


class CheckpointError(WeaveTtsError):
    """Checkpoint file is corrupt, truncated, or incompatible."""


class ConfigError(WeaveTtsError):
    """Engine configuration failed cross-field validation."""

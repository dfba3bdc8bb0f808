"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every raised error should
derive from one of the three category bases below.
"""


class HinerError(Exception):
    """Base class for all package errors."""


class ConfigError(HinerError):
    """Invalid or inconsistent configuration (exit code 2)."""


class DataError(HinerError):
    """Malformed, truncated, or otherwise unusable input data (exit code 3)."""


class DivergenceError(HinerError):
    """Training produced a non-finite loss (exit code 4).

    Carries the last finite-loss model state so sweeps can salvage it.
    """

    def __init__(self, message, epoch=None, step=None, last_good_state=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.last_good_state = last_good_state


class DegenerateInputError(DataError):
    """Input is structurally valid but degenerate (all-zero cube, zero-norm band)."""


class MalformedHeaderError(DataError):
    """Header or sidecar file cannot be parsed."""


class TruncatedPayloadError(DataError):
    """Payload holds fewer values than the header promises."""


class DimensionMismatchError(DataError):
    """Header dimensions disagree with the payload or with each other."""


class BadMagicError(DataError):
    """Stream does not start with the expected magic bytes."""


class VersionMismatchError(DataError):
    """Stream version is not supported by this reader."""


class CorruptStreamError(DataError):
    """Stream structure is damaged (bad Huffman payload, impossible lengths)."""

"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2, ``DivergedAtStep`` to 3.
"""


class DownscaleError(Exception):
    """Base class for all errors raised by this package."""


class DataError(DownscaleError, ValueError):
    """Input data or file contents violate a contract."""


class ConfigError(DownscaleError, ValueError):
    """Invalid configuration (usage-level problem)."""


# grid-core
class OutOfRange(DataError):
    pass


class OutOfExtent(DataError):
    pass


class FormatError(DataError):
    """Malformed binary file; ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagic(FormatError):
    pass


class Truncated(FormatError):
    def __init__(self, expected, actual, what="file"):
        super().__init__(
            f"truncated {what}: expected {expected} bytes, got {actual}", offset=actual
        )
        self.expected = expected
        self.actual = actual


class UnknownStation(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateStationId(DataError):
    pass


# resample
class NonDivisibleFactor(DataError):
    pass


class NaNInput(DataError):
    pass


# tensor-autodiff / models
class ShapeMismatch(DataError):
    pass


class ModeTruncationTooLarge(ConfigError):
    pass


class ChannelNotDivisible(DataError):
    pass


class NonScalarRoot(DownscaleError):
    pass


class GraphConsumed(DownscaleError):
    pass


class FingerprintMismatch(DataError):
    pass


# training / evaluation / synth
class EmptyTrainSet(DataError):
    pass


class DivergedAtStep(DownscaleError, ArithmeticError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class NoValidSamples(DataError):
    pass


class CountTooLarge(ConfigError):
    pass

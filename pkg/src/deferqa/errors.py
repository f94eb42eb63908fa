"""Exception hierarchy shared by every module."""


class DeferError(Exception):
    """Base class for all package errors."""


class NegativeCost(DeferError):
    pass


class TauOutOfRange(DeferError):
    pass


class ZeroVector(DeferError):
    pass


class NegativeEntry(DeferError):
    pass


class BadDimension(DeferError):
    pass


class DimensionMismatch(DeferError):
    pass


class IoError(DeferError, OSError):
    pass


class FormatVersionMismatch(DeferError):
    pass


class ChecksumMismatch(DeferError):
    pass


class EmptyDataset(DeferError):
    pass


class NonFiniteLoss(DeferError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class BadSpec(DeferError):
    pass


class DomainError(DeferError):
    pass


class OutOfRange(DeferError):
    pass


class NonNegativeTauViolated(DeferError):
    pass


class EmptyLog(DeferError):
    pass


class ParseError(DeferError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class InconsistentDims(ParseError):
    pass


class DuplicateQueryId(ParseError):
    pass


class ConfigError(DeferError):
    pass

"""Exception hierarchy.

Every error carries a stable class name so the CLI can report it verbatim.
``ValidationError`` subclasses map to exit code 1, ``FormatError`` and its
relatives (I/O side) map to exit code 2.
"""


class UGCNError(Exception):
    """Base class for all package errors."""


class ValidationError(UGCNError, ValueError):
    """Input violates a documented precondition."""


class FormatError(UGCNError):
    """A file could not be decoded.

    ``offset`` is the byte offset where decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


# topology
class NoRoot(ValidationError):
    pass


class MultipleRoots(ValidationError):
    pass


class CycleDetected(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


# kinematics
class InvalidRotation(ValidationError):
    pass


class BoneLengthMismatch(ValidationError):
    pass


class DegenerateBone(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


# numeric core
class ShapeMismatch(ValidationError):
    pass


class EvenKernel(ValidationError):
    pass


class RateOutOfRange(ValidationError):
    pass


class NonScalarOutput(ValidationError):
    pass


class TapeAlreadyConsumed(UGCNError, RuntimeError):
    pass


# model
class ConfigInvalid(ValidationError):
    pass


class BadTemporalLength(ValidationError):
    pass


class ConfigMismatch(ValidationError):
    pass


# data / training
class EmptyDataset(ValidationError):
    pass


class JointNeverVisible(ValidationError):
    pass


class ParseError(FormatError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


# cli
class UnknownCommand(ValidationError):
    pass


class MissingArgument(ValidationError):
    pass

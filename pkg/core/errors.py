"""
Exception hierarchy for kiln.

Every domain failure raises a subclass of KilnError so callers (the CLI in
particular) can separate expected failures from bugs.
"""


class KilnError(Exception):
    """Base class for all expected kiln failures."""


class ContractViolation(KilnError, ValueError):
    """An argument broke an operation's precondition."""


# =============================================================================
# Container
# =============================================================================

class ContainerError(KilnError):
    """Problem reading or writing a dataset container."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class MalformedHeaderError(ContainerError):
    pass


class HeaderInvariantError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


class SplitRangeError(ContainerError):
    pass


class UnknownSourceError(ContainerError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class RowRangeError(ContainerError, IndexError):
    pass


# =============================================================================
# Datasets
# =============================================================================

class DatasetError(KilnError):
    """Problem resolving, downloading or converting a dataset."""


class UnknownDatasetError(DatasetError):
    pass


class DigestMismatchError(DatasetError):
    pass


class MissingRawFilesError(DatasetError):
    pass


class UnknownSplitError(DatasetError):
    pass


class UnequalSourceLengthsError(DatasetError):
    pass


class IndexOutOfBoundsError(DatasetError, IndexError):
    pass


# =============================================================================
# Iteration and streams
# =============================================================================

class SchemeError(KilnError):
    pass


class StreamError(KilnError):
    pass


class UnknownMappingError(StreamError):
    pass


class StateMismatchError(StreamError):
    """A saved state tree does not fit the pipeline restoring it."""


class SpecError(KilnError):
    """A JSON pipeline or training spec is malformed."""


# =============================================================================
# Server
# =============================================================================

class ProtocolError(KilnError):
    pass


class HandshakeError(ProtocolError):
    pass


class FrameDecodeError(ProtocolError):
    pass


class ServerError(KilnError):
    pass


# =============================================================================
# Models and training
# =============================================================================

class GraphError(KilnError):
    pass


class ShapeError(GraphError):
    pass


class UnboundInputError(GraphError):
    pass


class BrickError(KilnError):
    pass


class StepRuleError(KilnError):
    pass


class MainLoopError(KilnError):
    pass


class SnapshotError(KilnError):
    pass

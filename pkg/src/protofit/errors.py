"""Exception types shared across the package."""


class ProtofitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigInvalid(ProtofitError):
    """A hyperparameter or run configuration violates its constraints."""


class CapacityExceeded(ProtofitError):
    """The prototype store is full."""


class InvariantViolation(ProtofitError):
    """A domain object breaks one of its structural invariants."""


class UnknownId(ProtofitError):
    """No live prototype has the requested id."""


class EmptyStore(ProtofitError):
    """An inference operation needs at least one prototype."""


class ModeMismatch(ProtofitError):
    """Classification operation on a regression store or vice versa."""


class EmptyClass(ProtofitError):
    """A class label has no training examples."""


class NonMonotoneStep(ProtofitError):
    """An importance row arrived with a step older than the window head."""


class EmptyWindow(ProtofitError):
    """Pruning requires at least one recorded importance row."""


class NonFiniteGradient(ProtofitError):
    """A NaN or infinity showed up in a loss or gradient buffer."""


class ShapeMismatch(ProtofitError):
    """Array arguments disagree on dimensions."""


class UnknownExample(ProtofitError):
    """An example id is missing from the encoder's embedding table."""


class ParseError(ProtofitError):
    """A data or config file is malformed."""


class DimensionMismatch(ProtofitError):
    """Feature dimensionality disagrees with the declared header."""


class LabelOutOfRange(ProtofitError):
    """A class label falls outside 0..C-1."""


class IoError(ProtofitError):
    """Underlying file operation failed."""


class VersionMismatch(ProtofitError):
    """Checkpoint was written by an incompatible format version."""


class CorruptChecksum(ProtofitError):
    """Checkpoint bytes do not match their recorded checksum."""

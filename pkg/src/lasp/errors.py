"""Exception types shared across the package."""


class LaspError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LaspError, ValueError):
    pass


class NumericError(LaspError, ValueError):
    pass


class DomainError(LaspError, ValueError):
    pass


class PartitionError(LaspError, ValueError):
    """A length or size fails a divisibility requirement."""


class HeadSplitError(PartitionError):
    pass


class StateError(LaspError, RuntimeError):
    """A stateful step ran out of order, e.g. backward before forward."""


class ProtocolError(LaspError, RuntimeError):
    """A point-to-point message was missing or malformed."""

    def __init__(self, message: str, *, rank: int | None = None, tag: str | None = None):
        super().__init__(message)
        self.rank = rank
        self.tag = tag


class FixtureFormatError(LaspError, ValueError):
    pass


class UnderflowWarning(UserWarning):
    """The per-chunk decay factor underflowed; history is fully decayed."""

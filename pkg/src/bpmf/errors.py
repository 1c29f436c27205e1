"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1, bad
input data exits 2, and runtime failures (numerics, scheduling,
networking) exit 3.
"""


class BpmfError(Exception):
    """Base class for all package-specific errors."""


class UsageError(BpmfError):
    """Bad command line or inconsistent configuration."""


class DataFormatError(BpmfError):
    """Unparseable or structurally invalid input data."""


class NotPositiveDefinite(BpmfError):
    """A matrix required to be positive definite was not."""


class DegreesOfFreedomTooSmall(BpmfError):
    """Wishart degrees of freedom must exceed dimension minus one."""


class PhaseAborted(BpmfError):
    """An item update failed; carries the index of the failing item."""

    def __init__(self, item: int, cause: BaseException):
        super().__init__(f"update of item {item} failed: {cause!r}")
        self.item = item
        self.cause = cause


class TooManyNodes(BpmfError):
    """More nodes than items on one side of the rating matrix."""


class WireError(BpmfError):
    """Malformed message on the item exchange wire."""


class BadLength(WireError):
    """Encoded message buffer has the wrong byte length."""


class BadKind(WireError):
    """Unknown message kind byte."""


class HandshakeMismatch(BpmfError):
    """Peers disagree on a run parameter; names the first mismatched field."""

    def __init__(self, field: str, mine, theirs):
        super().__init__(f"handshake mismatch on {field}: local={mine} peer={theirs}")
        self.field = field


class ConnectTimeout(BpmfError):
    """A peer did not become reachable within the allowed time."""


class ExchangeFailure(BpmfError):
    """Item exchange broke down (missing, unexpected, or excess traffic)."""
